"""Exhaustive nearest-neighbor retrieval and Recall@N evaluation.

Galleries at this scale fit comfortably in one dense matrix, so search is an
exact scan over squared Euclidean distances (embeddings are unit vectors, so
the ordering matches cosine similarity). Distance ties are broken by id so a
run is reproducible byte for byte.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geodata import DataError, DatasetIndex, GeoRecord, haversine_m, load_pairs
from .head import HeadParams, HeadTensors, embed


def embed_records(
    dataset: DatasetIndex,
    ids: list[str],
    params: HeadParams,
    threads: int = 1,
) -> np.ndarray:
    """Embed the given records with frozen params; rows follow ``ids`` order."""
    ht = HeadTensors(params)

    def one(rec_id: str) -> np.ndarray:
        return embed(dataset.load_fmap(rec_id), ht).embedding.data

    if threads > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, ids))
    else:
        rows = [one(i) for i in ids]
    return np.stack(rows) if rows else np.zeros((0, params.dim))


@dataclass
class EmbeddingIndex:
    ids: list[str]
    matrix: np.ndarray
    meta: dict[str, GeoRecord]


def build_index(
    ids: list[str],
    matrix: np.ndarray,
    records: dict[str, GeoRecord] | None = None,
) -> EmbeddingIndex:
    """Re-normalize rows on ingest; zero rows stay zero; ids must be unique."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise DataError(
            f"index needs one row per id: {len(ids)} ids, matrix {matrix.shape}")
    if len(set(ids)) != len(ids):
        seen = set()
        dup = next(i for i in ids if i in seen or seen.add(i))
        raise DataError(f"duplicate id in index: {dup!r}")
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    matrix = matrix / np.maximum(norms, 1e-12)
    meta = {i: records[i] for i in ids} if records else {}
    return EmbeddingIndex(list(ids), matrix, meta)


def ranked(index: EmbeddingIndex, query_vec: np.ndarray) -> list[tuple[str, float]]:
    """All gallery entries by ascending squared distance, ties by id."""
    q = np.asarray(query_vec, dtype=np.float64)
    nq = np.linalg.norm(q)
    if nq > 1e-12:
        q = q / nq
    d2 = ((index.matrix - q) ** 2).sum(axis=1)
    order = sorted(range(len(index.ids)), key=lambda i: (d2[i], index.ids[i]))
    return [(index.ids[i], float(d2[i])) for i in order]


def top_n(index: EmbeddingIndex, query_vec: np.ndarray, n: int) -> list[str]:
    return [rid for rid, _ in ranked(index, query_vec)[:max(0, n)]]


class GroundTruth:
    """Relevance oracle: explicit pair labels, or a geo radius rule."""

    def __init__(self, pairs=None, query_records=None, radius_m=None):
        self._pairs = pairs
        self._qrecs = query_records
        self._radius = radius_m

    @staticmethod
    def by_pairs(mapping: dict[str, list[str]]) -> "GroundTruth":
        return GroundTruth(pairs={k: set(v) for k, v in mapping.items()})

    @staticmethod
    def by_radius(query_records: dict[str, GeoRecord],
                  radius_m: float = 25.0) -> "GroundTruth":
        return GroundTruth(query_records=query_records, radius_m=radius_m)

    @property
    def uses_geo(self) -> bool:
        return self._pairs is None

    def relevant(self, query_id: str, index: EmbeddingIndex) -> set[str]:
        if self._pairs is not None:
            return self._pairs.get(query_id, set()) & set(index.ids)
        rec = self._qrecs.get(query_id)
        if rec is None or not rec.has_geo:
            raise DataError(f"query {query_id!r} has no geo-tag and no pair labels")
        out = set()
        for rid in index.ids:
            g = index.meta.get(rid)
            if g is not None and g.has_geo and rid != query_id:
                if haversine_m(rec.lat, rec.lon, g.lat, g.lon) <= self._radius:
                    out.add(rid)
        return out


@dataclass
class RecallResult:
    recalls: dict[int, float]
    evaluated: int
    excluded: int


def recall_at(
    index: EmbeddingIndex,
    queries: list[tuple[str, np.ndarray]],
    gt: GroundTruth,
    ns: tuple[int, ...] = (1, 5, 10, 20),
) -> RecallResult:
    """Fraction of queries whose top-N hits at least one relevant id.

    Queries with an empty relevant set are excluded from the denominator and
    reported in ``excluded``.
    """
    if not queries:
        raise DataError("recall_at got an empty query list")
    ns = tuple(sorted(set(int(n) for n in ns)))
    if any(n < 1 for n in ns):
        raise DataError(f"recall cutoffs must be >= 1, got {ns}")
    depth = max(ns)
    hits = {n: 0 for n in ns}
    evaluated = 0
    excluded = 0
    for qid, vec in queries:
        rel = gt.relevant(qid, index)
        if not rel:
            excluded += 1
            continue
        evaluated += 1
        first_hit = None
        for rank, rid in enumerate(top_n(index, vec, depth)):
            if rid in rel:
                first_hit = rank
                break
        if first_hit is not None:
            for n in ns:
                if first_hit < n:
                    hits[n] += 1
    if evaluated == 0:
        raise DataError("every query had an empty relevant set; nothing to score")
    return RecallResult(
        recalls={n: hits[n] / evaluated for n in ns},
        evaluated=evaluated,
        excluded=excluded,
    )


# -- protocol level -------------------------------------------------------------


@dataclass
class EvalReport:
    mode: str
    ns: tuple[int, ...]
    recalls: dict[int, float]
    evaluated: int
    excluded: int


def eval_protocol(
    dataset: DatasetIndex,
    params: HeadParams,
    mode: str,
    ns: tuple[int, ...] = (1, 5, 10, 20),
    radius_m: float = 25.0,
    pairs_path: str | Path | None = None,
    threads: int = 1,
) -> EvalReport:
    """Retrieval protocols: 's2s' same-domain, 's2t' cross-domain queries.

    Both protocols rank the source test gallery. Cross-domain relevance uses
    explicit pair labels when a pairs file is given or sits next to the
    manifest; otherwise both fall back to the geo radius rule.
    """
    if mode not in ("s2s", "s2t"):
        raise DataError(f"unknown eval mode {mode!r}")
    gallery = dataset.select("test_gallery", "source")
    qdomain = "source" if mode == "s2s" else "target"
    queries = dataset.select("test_query", qdomain)
    if not gallery:
        raise DataError("dataset has no source test gallery to rank")
    if not queries:
        raise DataError(f"dataset has no {qdomain} test queries for mode {mode}")

    gallery_ids = [r.id for r in gallery]
    gvecs = embed_records(dataset, gallery_ids, params, threads)
    index = build_index(gallery_ids, gvecs, dataset.by_id)

    if mode == "s2t":
        path = Path(pairs_path) if pairs_path else dataset.pairs_path
        if path.is_file():
            gt = GroundTruth.by_pairs(load_pairs(path))
        else:
            gt = GroundTruth.by_radius({r.id: r for r in queries}, radius_m)
    else:
        gt = GroundTruth.by_radius({r.id: r for r in queries}, radius_m)

    qids = [r.id for r in queries]
    qvecs = embed_records(dataset, qids, params, threads)
    result = recall_at(index, list(zip(qids, qvecs)), gt, ns)
    return EvalReport(mode, tuple(sorted(set(ns))), result.recalls,
                      result.evaluated, result.excluded)


def write_report(report: EvalReport, out_dir: str | Path,
                 figure: bool = True) -> dict[str, Path]:
    """Write the delimited recall table and, optionally, its curve rendering."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "report.csv"
    lines = ["N,recall"]
    for n in report.ns:
        lines.append(f"{n},{report.recalls[n]:.4f}")
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    paths = {"csv": csv_path}
    if figure:
        from .report import save_recall_curve
        paths["figure"] = save_recall_curve(
            report.ns, [report.recalls[n] for n in report.ns],
            out_dir / "recall_curve.png", title=f"Recall@N ({report.mode})")
    return paths


# -- index persistence ------------------------------------------------------------


def save_index(path: str | Path, index: EmbeddingIndex) -> None:
    meta = json.dumps({
        rid: {
            "lat": r.lat, "lon": r.lon, "domain": r.domain,
            "split": r.split, "fmap_path": r.fmap_path,
        } for rid, r in index.meta.items()
    })
    np.savez(path, ids=np.array(index.ids, dtype=np.str_),
             matrix=index.matrix, meta=np.array(meta))


def load_index(path: str | Path) -> EmbeddingIndex:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"index file not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            ids = [str(i) for i in z["ids"]]
            matrix = np.asarray(z["matrix"], dtype=np.float64)
            meta_raw = json.loads(str(z["meta"]))
    except (KeyError, ValueError, json.JSONDecodeError):
        raise DataError(f"{path}: not a valid embedding index") from None
    meta = {
        rid: GeoRecord(id=rid, **fields) for rid, fields in meta_raw.items()
    }
    return build_index(ids, matrix, meta or None)
