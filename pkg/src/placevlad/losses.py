"""Weakly supervised triplet ranking loss and multi-kernel MMD alignment.

The ranking loss treats geo-nearby gallery images as *potential* positives:
only the best (smallest squared distance) positive enters the hinge, so label
noise among the candidates is tolerated. The domain loss is a squared maximum
mean discrepancy with a bank of Gaussian kernels at bandwidths spread around
the median pairwise distance; it compares adapter-output descriptors sampled
from the two domains and is added to the ranking term with a fixed weight.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

BANDWIDTH_FACTORS = (0.25, 0.5, 1.0, 2.0, 4.0)


class ContractError(ValueError):
    """A loss was called with inputs that violate its contract."""


@dataclass
class TripletTuple:
    """One mined training example: query, candidate positives, hard negatives."""

    query: Tensor
    positives: list[Tensor]
    negatives: list[Tensor]
    margin: float = 0.1


def triplet_loss(t: TripletTuple) -> Tensor:
    """sum_j max(0, min_i d2(q, p_i) + margin - d2(q, n_j)).

    The min over positives is resolved on values before the graph branch is
    chosen, so ties take the lowest-index positive and the hinge uses the
    zero branch exactly at zero.
    """
    if not t.positives:
        raise ContractError("triplet tuple has no positives")
    if not t.negatives:
        raise ContractError("triplet tuple has no negatives")
    pos_d2 = [ad.sq_distance(t.query, p) for p in t.positives]
    best = pos_d2[int(np.argmin([d.data for d in pos_d2]))]
    total = None
    for n in t.negatives:
        gap = ad.relu(best + t.margin - ad.sq_distance(t.query, n))
        total = gap if total is None else total + gap
    return total


@dataclass(frozen=True)
class MmdConfig:
    """Kernel bank and estimator choice for the domain loss."""

    bandwidths: tuple[float, ...]
    weights: tuple[float, ...] | None = None
    estimator: str = "biased"
    alpha: float = 0.99

    def __post_init__(self):
        if not self.bandwidths or any(b <= 0 for b in self.bandwidths):
            raise ContractError(f"bandwidths must be positive, got {self.bandwidths}")
        weights = self.weights
        if weights is None:
            weights = (1.0 / len(self.bandwidths),) * len(self.bandwidths)
            object.__setattr__(self, "weights", weights)
        if len(weights) != len(self.bandwidths):
            raise ContractError("one weight per bandwidth required")
        if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
            raise ContractError(f"kernel weights must be a convex combination, got {weights}")
        if self.estimator not in ("biased", "unbiased"):
            raise ContractError(f"unknown estimator {self.estimator!r}")
        if not (0.0 <= self.alpha <= 1.0):
            raise ContractError(f"alpha must lie in [0, 1], got {self.alpha}")


def median_bandwidths(sample: np.ndarray,
                      factors: tuple[float, ...] = BANDWIDTH_FACTORS) -> tuple[float, ...]:
    """Median pairwise distance of the pooled sample, spread by ``factors``.

    A degenerate sample (all points identical) has median 0; that falls back
    to 1.0 with a warning rather than producing zero-width kernels.
    """
    sample = np.asarray(sample, dtype=np.float64)
    if sample.ndim != 2 or sample.shape[0] < 2:
        raise ContractError("median_bandwidths needs at least two descriptors")
    d2 = ((sample[:, None, :] - sample[None, :, :]) ** 2).sum(axis=2)
    iu = np.triu_indices(sample.shape[0], k=1)
    med = float(np.median(np.sqrt(d2[iu])))
    if med <= 0.0:
        log.warning("median pairwise distance is 0; falling back to bandwidth 1.0")
        med = 1.0
    return tuple(med * f for f in factors)


def _pairwise_sq_dists(a: Tensor, b: Tensor) -> Tensor:
    sq_a = ad.tsum(a * a, axis=1, keepdims=True)            # (Na, 1)
    sq_b = ad.transpose(ad.tsum(b * b, axis=1, keepdims=True))  # (1, Nb)
    return sq_a + sq_b - ad.matmul(a, ad.transpose(b)) * 2.0


def _block_mean(kmat: Tensor, unbiased_within: bool) -> Tensor:
    n, m = kmat.data.shape
    if not unbiased_within:
        return ad.tsum(kmat) * (1.0 / (n * m))
    off = ad.tsum(kmat) - ad.tsum(kmat * Tensor(np.eye(n)))
    return off * (1.0 / (n * (n - 1)))


def mk_mmd(xs, xt, cfg: MmdConfig) -> Tensor:
    """Multi-kernel squared MMD between two descriptor sets, (Ns,D) and (Nt,D).

    Returned as a graph node so gradients flow back into both samples. The
    biased estimator keeps the diagonal terms; the unbiased one drops them
    from the within-domain blocks and needs at least two samples per domain.
    """
    xs, xt = ad.as_tensor(xs), ad.as_tensor(xt)
    if xs.ndim != 2 or xt.ndim != 2 or xs.data.shape[1] != xt.data.shape[1]:
        raise ContractError(
            f"mk_mmd needs (Ns,D) and (Nt,D) inputs, got {xs.data.shape} "
            f"and {xt.data.shape}")
    ns, nt = xs.data.shape[0], xt.data.shape[0]
    if ns < 1 or nt < 1:
        raise ContractError("mk_mmd needs at least one sample per domain")
    unbiased = cfg.estimator == "unbiased"
    if unbiased and (ns < 2 or nt < 2):
        raise ContractError("unbiased estimator needs at least two samples per domain")

    d2_ss = _pairwise_sq_dists(xs, xs)
    d2_tt = _pairwise_sq_dists(xt, xt)
    d2_st = _pairwise_sq_dists(xs, xt)

    total = None
    for sigma, wu in zip(cfg.bandwidths, cfg.weights):
        scale = -1.0 / (2.0 * sigma * sigma)
        term = (
            _block_mean(ad.exp(d2_ss * scale), unbiased)
            + _block_mean(ad.exp(d2_tt * scale), unbiased)
            - _block_mean(ad.exp(d2_st * scale), False) * 2.0
        )
        total = term * wu if total is None else total + term * wu
    return total


def combined_loss(ranking, domain, alpha: float):
    """L = ranking + alpha * domain; ``domain`` may be None when alpha is 0."""
    if domain is None:
        if alpha != 0.0:
            raise ContractError("alpha > 0 requires a domain loss term")
        return ranking
    return ranking + domain * alpha
