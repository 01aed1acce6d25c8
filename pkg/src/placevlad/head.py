"""Trainable descriptor head: adapter conv, attention scores, VLAD pooling.

The head turns an HxWxD backbone feature map into a fixed-length unit
vector. Pipeline: a 3x3 adapter conv with ReLU, a per-cell attention score
(ReLU, 1x1 conv, softplus, so scores stay strictly positive), soft cluster
assignment, then one of four aggregation modes:

  vanilla  residuals weighted by soft assignment only; attention ignored
  a1       attention multiplies each cell's contribution from outside; the
           assignment still sees the unweighted descriptor
  a2       the descriptor is rescaled by its attention weight before both
           the assignment and the residual
  fused    elementwise sum of the a1 and a2 matrices before normalization

With all attention weights equal to 1, a1 and a2 both collapse to vanilla,
and fused differs only by the factor 2 that normalization removes. The K x D
matrix is L2-normalized per cluster row, flattened, and L2-normalized again
(intra-normalization can be switched off, leaving only the global step).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geodata import DataError

MODES = ("vanilla", "a1", "a2", "fused")
ASSIGN_INIT_BETA = 10.0
CHECKPOINT_MAGIC = b"PVLD\x00"
CHECKPOINT_VERSION = 1

PARAM_FIELDS = (
    "adapter_w", "adapter_b", "attn_w", "attn_b",
    "assign_w", "assign_b", "centers",
)


@dataclass
class HeadParams:
    """All trainable arrays plus the two structural switches.

    Shapes: adapter_w (3,3,Din,D), adapter_b (D,), attn_w (D,), attn_b (),
    assign_w (D,K), assign_b (K,), centers (K,D).
    """

    adapter_w: np.ndarray
    adapter_b: np.ndarray
    attn_w: np.ndarray
    attn_b: np.ndarray
    assign_w: np.ndarray
    assign_b: np.ndarray
    centers: np.ndarray
    mode: str = "fused"
    intra_norm: bool = True

    def __post_init__(self):
        for name in PARAM_FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.mode not in MODES:
            raise DataError(f"unknown head mode {self.mode!r}")
        k, d = self.centers.shape
        din = self.adapter_w.shape[2]
        ok = (
            self.adapter_w.shape == (3, 3, din, d)
            and self.adapter_b.shape == (d,)
            and self.attn_w.shape == (d,)
            and self.attn_b.shape == ()
            and self.assign_w.shape == (d, k)
            and self.assign_b.shape == (k,)
        )
        if not ok:
            raise DataError("inconsistent head parameter shapes")

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    @property
    def din(self) -> int:
        return self.adapter_w.shape[2]

    @property
    def dim(self) -> int:
        return self.k * self.d

    def copy(self) -> "HeadParams":
        return replace(self, **{n: getattr(self, n).copy() for n in PARAM_FIELDS})


class HeadTensors:
    """Tensor view of a HeadParams for building one computation graph.

    A fresh view per optimizer step keeps gradient accumulation scoped to
    that step; inference views skip the tape entirely.
    """

    def __init__(self, params: HeadParams, trainable: bool = False):
        self.params = params
        self.mode = params.mode
        self.intra_norm = params.intra_norm
        for name in PARAM_FIELDS:
            setattr(self, name, Tensor(getattr(params, name), requires_grad=trainable))

    def tensors(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, t in self.tensors().items():
            out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return out


# -- forward pieces ----------------------------------------------------------


def adapter(fm, ht: HeadTensors) -> Tensor:
    """3x3 same-padding conv + ReLU; output feeds everything downstream."""
    return ad.relu(ad.conv2d_3x3(fm, ht.adapter_w, ht.adapter_b))


def attention(fm, ht: HeadTensors) -> Tensor:
    """Per-cell positive saliency scores, shape (H, W)."""
    fm = ad.as_tensor(fm)
    h, w, _ = fm.data.shape
    att_w = ad.reshape(ht.attn_w, (ht.attn_w.data.shape[0], 1))
    att_b = ad.reshape(ht.attn_b, (1,))
    logits = ad.conv2d_1x1(ad.relu(fm), att_w, att_b)
    return ad.reshape(ad.softplus(logits), (h, w))


def soft_assign(x, ht: HeadTensors) -> Tensor:
    """Linear-softmax cluster membership, rows sum to 1. x is (N, D)."""
    return ad.softmax(ad.add(ad.matmul(x, ht.assign_w), ht.assign_b))


def _aggregate(x: Tensor, a: Tensor, centers: Tensor) -> Tensor:
    # V = a^T x - diag(colsum a) C, i.e. soft-assigned residual sums
    s1 = ad.matmul(ad.transpose(a), x)
    col = ad.transpose(ad.tsum(a, axis=0, keepdims=True))
    return ad.sub(s1, ad.mul(col, centers))


def vlad(x, a, ht: HeadTensors) -> Tensor:
    """Plain residual aggregation: V[k] = sum_i a[i,k] (x_i - c_k)."""
    return _aggregate(ad.as_tensor(x), ad.as_tensor(a), ht.centers)


def vlad_a1(x, w, ht: HeadTensors) -> Tensor:
    """Attention outside: assignment sees x, each term scaled by w_i."""
    x = ad.as_tensor(x)
    wcol = ad.reshape(w, (x.data.shape[0], 1))
    wa = ad.mul(soft_assign(x, ht), wcol)
    return _aggregate(x, wa, ht.centers)


def vlad_a2(x, w, ht: HeadTensors) -> Tensor:
    """Attention inside: assignment and residual both see w_i * x_i."""
    x = ad.as_tensor(x)
    wcol = ad.reshape(w, (x.data.shape[0], 1))
    xw = ad.mul(x, wcol)
    wa = ad.mul(soft_assign(xw, ht), wcol)
    return _aggregate(xw, wa, ht.centers)


def vlad_fused(x, w, ht: HeadTensors) -> Tensor:
    return ad.add(vlad_a1(x, w, ht), vlad_a2(x, w, ht))


def normalize_vlad(v: Tensor, intra: bool = True) -> Tensor:
    """Per-cluster L2 (optional), flatten, global L2. Zero input stays zero."""
    k, d = v.data.shape
    if intra:
        v = ad.l2_normalize(v, axis=1)
    flat = ad.reshape(v, (k * d,))
    return ad.l2_normalize(flat, axis=0)


@dataclass
class EmbedResult:
    embedding: Tensor
    v: Tensor
    attention: Tensor | None


@dataclass(frozen=True)
class VladDescriptor:
    v: np.ndarray
    embedding: np.ndarray


def embed(fm: np.ndarray | Tensor, ht: HeadTensors, mode: str | None = None) -> EmbedResult:
    """Full pipeline from a raw feature map to the unit descriptor."""
    mode = mode or ht.mode
    if mode not in MODES:
        raise DataError(f"unknown head mode {mode!r}")
    fm = ad.as_tensor(fm)
    if fm.ndim != 3 or fm.data.shape[2] != ht.adapter_w.data.shape[2]:
        raise DataError(
            f"embed expects HxWx{ht.adapter_w.data.shape[2]} input, "
            f"got {fm.data.shape}"
        )
    fmap = adapter(fm, ht)
    h, w, d = fmap.data.shape
    x = ad.reshape(fmap, (h * w, d))
    att = None
    if mode == "vanilla":
        v = vlad(x, soft_assign(x, ht), ht)
    else:
        att = attention(fmap, ht)
        weights = ad.reshape(att, (h * w,))
        if mode == "a1":
            v = vlad_a1(x, weights, ht)
        elif mode == "a2":
            v = vlad_a2(x, weights, ht)
        else:
            v = vlad_fused(x, weights, ht)
    return EmbedResult(normalize_vlad(v, ht.intra_norm), v, att)


def describe(fm: np.ndarray, params: HeadParams, mode: str | None = None) -> VladDescriptor:
    """Inference-only convenience wrapper returning plain arrays."""
    out = embed(fm, HeadTensors(params), mode=mode)
    return VladDescriptor(v=out.v.data, embedding=out.embedding.data)


def export_heatmap(fm: np.ndarray, params: HeadParams, path: str | Path) -> np.ndarray:
    """Write the attention map as a binary 8-bit PGM, min-max scaled.

    A constant map has no range to scale, so it renders as mid-gray (128).
    Returns the byte image that was written.
    """
    ht = HeadTensors(params)
    scores = attention(adapter(fm, ht), ht).data
    lo, hi = scores.min(), scores.max()
    if hi > lo:
        img = np.round(255.0 * (scores - lo) / (hi - lo)).astype(np.uint8)
    else:
        img = np.full(scores.shape, 128, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes(order="C"))
    return img


# -- initialization ------------------------------------------------------------


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
           iters: int = 20) -> np.ndarray:
    """Plain Lloyd iterations with seeded init; empty clusters re-seed."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < k:
        raise DataError(f"k-means needs at least k={k} points, got {n}")
    centers = points[rng.choice(n, size=k, replace=False)].copy()
    for _ in range(iters):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        owner = d2.argmin(axis=1)
        for j in range(k):
            mask = owner == j
            if mask.any():
                centers[j] = points[mask].mean(axis=0)
            else:
                centers[j] = points[rng.integers(0, n)]
    return centers


def init_head(
    sample_maps: list[np.ndarray],
    k: int,
    rng: np.random.Generator,
    mode: str = "fused",
    d: int | None = None,
    intra_norm: bool = True,
    sample_cap: int = 4096,
) -> HeadParams:
    """Build a head whose clusters come from k-means over adapted samples.

    The adapter starts as a center-tap identity plus small noise, so the
    initial embedding is close to plain VLAD over the raw (ReLU'd) maps; the
    assignment is set so cluster k's logit is 2*beta*c_k.x - beta*|c_k|^2,
    which makes the softmax approximate nearest-center assignment. Attention
    starts near-uniform (softplus of small logits).
    """
    if not sample_maps:
        raise DataError("init_head needs at least one sample map")
    din = sample_maps[0].shape[2]
    d = d or din
    adapter_w = rng.normal(0.0, 0.01, size=(3, 3, din, d))
    if d == din:
        adapter_w[1, 1] += np.eye(din)
    else:
        adapter_w[1, 1] += rng.normal(0.0, 1.0 / np.sqrt(din), size=(din, d))
    adapter_b = np.zeros(d)

    probe = HeadParams(
        adapter_w=adapter_w, adapter_b=adapter_b,
        attn_w=np.zeros(d), attn_b=np.zeros(()),
        assign_w=np.zeros((d, 1)), assign_b=np.zeros(1),
        centers=np.zeros((1, d)), mode=mode, intra_norm=intra_norm,
    )
    ht = HeadTensors(probe)
    rows = []
    for fm in sample_maps:
        out = adapter(fm, ht).data
        rows.append(out.reshape(-1, d))
    pool = np.concatenate(rows, axis=0)
    if pool.shape[0] > sample_cap:
        pool = pool[rng.choice(pool.shape[0], size=sample_cap, replace=False)]
    centers = kmeans(pool, k, rng)

    return HeadParams(
        adapter_w=adapter_w,
        adapter_b=adapter_b,
        attn_w=rng.normal(0.0, 0.01, size=d),
        attn_b=np.zeros(()),
        assign_w=2.0 * ASSIGN_INIT_BETA * centers.T,
        assign_b=-ASSIGN_INIT_BETA * (centers ** 2).sum(axis=1),
        centers=centers,
        mode=mode,
        intra_norm=intra_norm,
    )


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path: str | Path, params: HeadParams) -> None:
    """Versioned binary dump; float64 little-endian, bit-exact round trip."""
    meta = {
        "mode": params.mode,
        "intra_norm": params.intra_norm,
        "tensors": [
            {"name": n, "shape": list(getattr(params, n).shape)}
            for n in PARAM_FIELDS
        ],
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for n in PARAM_FIELDS:
            fh.write(getattr(params, n).astype("<f8").tobytes(order="C"))


def load_checkpoint(path: str | Path) -> HeadParams:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    if raw[:5] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a head checkpoint (bad magic)")
    version, meta_len = struct.unpack("<II", raw[5:13])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(raw[13:13 + meta_len])
    except json.JSONDecodeError:
        raise DataError(f"{path}: corrupt checkpoint header") from None
    offset = 13 + meta_len
    kwargs = {}
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise DataError(f"{path}: truncated checkpoint payload")
        kwargs[entry["name"]] = np.frombuffer(
            raw[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(raw):
        raise DataError(f"{path}: trailing bytes after checkpoint payload")
    missing = set(PARAM_FIELDS) - set(kwargs)
    if missing:
        raise DataError(f"{path}: checkpoint missing tensors {sorted(missing)}")
    return HeadParams(mode=meta["mode"], intra_norm=bool(meta["intra_norm"]), **kwargs)
