"""Geo-tagged feature-map datasets: manifest, binary map format, distances.

A dataset on disk is a directory with a ``manifest.jsonl`` (one record per
line), the feature maps it points at, and optionally a ``pairs.jsonl`` with
explicit query -> relevant-gallery labels for cross-domain evaluation.

Feature maps use a small binary container ("FMAP1"): a 6-byte magic, three
little-endian uint32 dims H, W, D, then H*W*D float32 values in row-major
order (h outer, then w, then channel).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FMAP_MAGIC = b"FMAP1\x00"
EARTH_RADIUS_M = 6371008.8

DOMAINS = ("source", "target")
SPLITS = ("train_gallery", "train_query", "test_gallery", "test_query")


class DataError(ValueError):
    """A dataset, manifest, or binary file violates its contract."""


@dataclass(frozen=True)
class GeoRecord:
    id: str
    lat: float | None
    lon: float | None
    domain: str
    split: str
    fmap_path: str

    def __post_init__(self):
        if not self.id:
            raise DataError("record id must be a non-empty string")
        if self.domain not in DOMAINS:
            raise DataError(f"record {self.id}: unknown domain {self.domain!r}")
        if self.split not in SPLITS:
            raise DataError(f"record {self.id}: unknown split {self.split!r}")
        if (self.lat is None) != (self.lon is None):
            raise DataError(f"record {self.id}: lat and lon must be set together")
        if self.lat is not None:
            if not (-90.0 <= self.lat <= 90.0):
                raise DataError(f"record {self.id}: lat {self.lat} out of range")
            if not (-180.0 <= self.lon <= 180.0):
                raise DataError(f"record {self.id}: lon {self.lon} out of range")

    @property
    def has_geo(self) -> bool:
        return self.lat is not None


def haversine_m(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in meters between two WGS84-ish points."""
    p1 = math.radians(lat1)
    p2 = math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2.0) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))


# -- FMAP1 binary container ------------------------------------------------


def write_fmap(path: str | Path, fm: np.ndarray) -> None:
    fm = np.asarray(fm)
    if fm.ndim != 3:
        raise DataError(f"feature map must be HxWxD, got shape {fm.shape}")
    if not np.all(np.isfinite(fm)):
        raise DataError(f"refusing to write non-finite feature map to {path}")
    h, w, d = fm.shape
    payload = fm.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(FMAP_MAGIC)
        fh.write(struct.pack("<III", h, w, d))
        fh.write(payload)


def read_fmap(path: str | Path) -> np.ndarray:
    """Load an FMAP1 file as a float64 HxWxD array."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"feature map file not found: {path}") from None
    if raw[:6] != FMAP_MAGIC:
        raise DataError(f"{path}: bad magic, not an FMAP1 file")
    if len(raw) < 18:
        raise DataError(f"{path}: truncated header")
    h, w, d = struct.unpack("<III", raw[6:18])
    if h == 0 or w == 0 or d == 0:
        raise DataError(f"{path}: zero dimension in header ({h}x{w}x{d})")
    expected = 18 + 4 * h * w * d
    if len(raw) != expected:
        raise DataError(
            f"{path}: payload length {len(raw) - 18} does not match "
            f"header {h}x{w}x{d} ({expected - 18} bytes expected)"
        )
    fm = np.frombuffer(raw, dtype="<f4", offset=18).reshape(h, w, d)
    fm = fm.astype(np.float64)
    if not np.all(np.isfinite(fm)):
        raise DataError(f"{path}: feature map contains non-finite values")
    return fm


# -- manifest / dataset ------------------------------------------------------


class DatasetIndex:
    """Order-preserving view over a manifest plus lazy, cached map loading.

    Loaded maps are kept in memory (desk-scale datasets are a few dozen MB at
    most). ``fmap_reads`` counts cold reads per domain, which lets tests pin
    down that a source-only training run never touches target files.
    """

    def __init__(self, root: Path, records: list[GeoRecord]):
        self.root = Path(root)
        self.records = list(records)
        self.by_id: dict[str, GeoRecord] = {}
        for rec in self.records:
            if rec.id in self.by_id:
                raise DataError(f"duplicate record id {rec.id!r} in manifest")
            self.by_id[rec.id] = rec
        self._cache: dict[str, np.ndarray] = {}
        self.fmap_reads: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.records)

    def select(self, split: str | None = None, domain: str | None = None) -> list[GeoRecord]:
        return [
            r for r in self.records
            if (split is None or r.split == split)
            and (domain is None or r.domain == domain)
        ]

    def ids(self, split: str | None = None, domain: str | None = None) -> list[str]:
        return [r.id for r in self.select(split, domain)]

    def load_fmap(self, rec_id: str) -> np.ndarray:
        fm = self._cache.get(rec_id)
        if fm is None:
            rec = self.by_id.get(rec_id)
            if rec is None:
                raise DataError(f"unknown record id {rec_id!r}")
            fm = read_fmap(self.root / rec.fmap_path)
            self._cache[rec_id] = fm
            self.fmap_reads[rec.domain] = self.fmap_reads.get(rec.domain, 0) + 1
        return fm

    @property
    def pairs_path(self) -> Path:
        return self.root / "pairs.jsonl"


def write_manifest(records: list[GeoRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({
                "id": rec.id,
                "lat": rec.lat,
                "lon": rec.lon,
                "domain": rec.domain,
                "split": rec.split,
                "fmap_path": rec.fmap_path,
            }) + "\n")


def load_dataset(manifest_path: str | Path) -> DatasetIndex:
    """Parse a manifest and validate it; feature maps load lazily on use."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.jsonl"
    if not manifest_path.is_file():
        raise DataError(f"manifest not found: {manifest_path}")
    records = []
    with open(manifest_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{manifest_path}:{lineno}: malformed JSON ({e.msg})") from None
            try:
                records.append(GeoRecord(
                    id=str(obj["id"]),
                    lat=obj.get("lat"),
                    lon=obj.get("lon"),
                    domain=obj.get("domain", "source"),
                    split=obj["split"],
                    fmap_path=obj["fmap_path"],
                ))
            except KeyError as e:
                raise DataError(f"{manifest_path}:{lineno}: missing field {e}") from None
            except DataError as e:
                raise DataError(f"{manifest_path}:{lineno}: {e}") from None
    return DatasetIndex(manifest_path.parent, records)


def load_pairs(path: str | Path) -> dict[str, list[str]]:
    """Explicit relevance labels: one {query_id, relevant_ids} object per line."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"pairs file not found: {path}")
    pairs: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                qid = str(obj["query_id"])
                rel = [str(r) for r in obj["relevant_ids"]]
            except (json.JSONDecodeError, KeyError, TypeError):
                raise DataError(f"{path}:{lineno}: malformed pair record") from None
            if qid in pairs:
                raise DataError(f"{path}:{lineno}: duplicate query_id {qid!r}")
            pairs[qid] = rel
    return pairs


def potential_positives(
    query: GeoRecord,
    gallery: list[GeoRecord],
    radius_m: float = 25.0,
) -> list[str]:
    """Gallery ids within ``radius_m`` of the query, nearest first, ties by id."""
    if not query.has_geo:
        raise DataError(f"query {query.id} has no geo-tag")
    hits = []
    for rec in gallery:
        if not rec.has_geo or rec.id == query.id:
            continue
        d = haversine_m(query.lat, query.lon, rec.lat, rec.lon)
        if d <= radius_m:
            hits.append((d, rec.id))
    hits.sort()
    return [rid for _, rid in hits]


# -- synthetic two-domain benchmark -----------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the planted-signature benchmark generator.

    Each place owns a signature channel pattern that views of that place
    plant at random spatial cells; the remaining cells hold clutter drawn
    from a pool shared across the whole dataset, with a marker component on
    the last few channels so a linear score can tell clutter from signal.
    Target-domain views additionally pass through a channelwise affine style
    shift (drawn once per dataset, scaled by ``shift``), extra noise, and are
    replaced outright by pure noise with probability ``outlier_prob``. With
    ``shift == 0`` the target branch is skipped entirely and target views are
    drawn from the exact source path.
    """

    n_places: int
    views_per_place: int = 4
    h: int = 8
    w: int = 8
    d: int = 16
    shift: float = 1.0
    seed: int = 0
    target_train_views: int = 2
    target_test_queries: int = 1
    signal_frac: float = 0.3
    n_clutter: int = 12
    clutter_per_view: int = 2
    view_noise: float = 0.15
    target_noise: float = 0.1
    outlier_prob: float = 0.1
    lat0: float = 52.37
    lon0: float = 4.89

    def __post_init__(self):
        if self.n_places < 2:
            raise DataError("synth needs at least 2 places")
        if self.views_per_place < 2:
            raise DataError("synth needs at least 2 views per place (query + gallery)")
        if min(self.h, self.w, self.d) < 1:
            raise DataError("synth map dims must be positive")
        if self.shift < 0:
            raise DataError("synth shift must be >= 0")
        if self.clutter_per_view < 1 or self.n_clutter < 1:
            raise DataError("synth needs a positive clutter pool")


@dataclass(frozen=True)
class _Style:
    gain: np.ndarray
    offset: np.ndarray


def _place_anchor(cfg: SynthConfig, idx: int) -> tuple[float, float]:
    # grid spacing ~167 m in lat and ~170 m in lon at lat0, so any two
    # places sit well beyond the 25 m positive radius and the 100 m floor
    cols = max(2, int(math.ceil(math.sqrt(cfg.n_places))))
    row, col = divmod(idx, cols)
    return cfg.lat0 + 0.0015 * row, cfg.lon0 + 0.0025 * col


def _jitter(rng: np.random.Generator, lat: float, lon: float, radius_m: float = 10.0):
    r = radius_m * math.sqrt(rng.random())
    theta = 2.0 * math.pi * rng.random()
    dlat = r * math.cos(theta) / 111194.93
    dlon = r * math.sin(theta) / (111194.93 * math.cos(math.radians(lat)))
    return lat + dlat, lon + dlon


def _source_map(rng, sig, clutter, cfg: SynthConfig) -> np.ndarray:
    # Each view sees only a small random subset of the clutter pool, the way
    # parked cars and passers-by change between visits: two views of one
    # place mostly disagree on clutter, while views of different places can
    # collide on it. Unweighted aggregation gets confused by that overlap;
    # a score keyed on the marker channels can ignore it.
    h, w, d = cfg.h, cfg.w, cfg.d
    local = clutter[rng.choice(clutter.shape[0],
                               size=min(cfg.clutter_per_view, clutter.shape[0]),
                               replace=False)]
    signal_mask = rng.random((h, w)) < cfg.signal_frac
    pick = rng.integers(0, local.shape[0], size=(h, w))
    base = np.where(signal_mask[..., None], sig, local[pick])
    fm = base + rng.normal(0.0, cfg.view_noise, size=(h, w, d))
    return np.maximum(fm, 0.0)


def _target_map(rng, sig, clutter, style: _Style, cfg: SynthConfig) -> np.ndarray:
    if cfg.shift == 0.0:
        return _source_map(rng, sig, clutter, cfg)
    if rng.random() < cfg.outlier_prob:
        return rng.uniform(0.0, 2.0, size=(cfg.h, cfg.w, cfg.d))
    fm = _source_map(rng, sig, clutter, cfg)
    fm = fm * style.gain + style.offset
    fm = fm + rng.normal(0.0, cfg.target_noise, size=fm.shape)
    return np.maximum(fm, 0.0)


def synth_generate(cfg: SynthConfig, out_dir: str | Path) -> DatasetIndex:
    """Write a deterministic two-domain benchmark under ``out_dir``.

    Layout: first half of the places is the training region, second half the
    held-out test region. Per place, view 0 is the query and the rest are
    gallery. Target training views carry no geo-tags (they only feed domain
    alignment); target test queries are geo-tagged and also listed in
    ``pairs.jsonl`` against the source test gallery.
    """
    out_dir = Path(out_dir)
    fmap_dir = out_dir / "fmaps"
    fmap_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    marker = max(2, cfg.d // 4)
    clutter = rng.uniform(0.2, 1.6, size=(cfg.n_clutter, cfg.d))
    clutter[:, cfg.d - marker:] += 2.0
    signatures = rng.uniform(0.2, 1.6, size=(cfg.n_places, cfg.d))
    signatures[:, cfg.d - marker:] *= 0.25

    style = _Style(
        gain=np.exp(cfg.shift * rng.normal(0.0, 0.5, size=cfg.d)),
        offset=cfg.shift * rng.normal(0.0, 0.4, size=cfg.d),
    )

    n_train_places = cfg.n_places // 2
    records: list[GeoRecord] = []
    pair_rows: list[dict] = []
    gallery_by_place: dict[int, list[str]] = {}

    def emit(rec_id, lat, lon, domain, split, fm):
        rel = f"fmaps/{rec_id}.fmap"
        write_fmap(out_dir / rel, fm)
        records.append(GeoRecord(rec_id, lat, lon, domain, split, rel))

    for p in range(cfg.n_places):
        train = p < n_train_places
        anchor = _place_anchor(cfg, p)
        gallery_by_place[p] = []
        for v in range(cfg.views_per_place):
            lat, lon = _jitter(rng, *anchor)
            split = ("train_query" if train else "test_query") if v == 0 \
                else ("train_gallery" if train else "test_gallery")
            rec_id = f"src_p{p:04d}_v{v}"
            emit(rec_id, lat, lon, "source", split,
                 _source_map(rng, signatures[p], clutter, cfg))
            if v > 0:
                gallery_by_place[p].append(rec_id)

    for p in range(n_train_places):
        for v in range(cfg.target_train_views):
            rec_id = f"tgt_p{p:04d}_v{v}"
            emit(rec_id, None, None, "target", "train_gallery",
                 _target_map(rng, signatures[p], clutter, style, cfg))

    for p in range(n_train_places, cfg.n_places):
        anchor = _place_anchor(cfg, p)
        for v in range(cfg.target_test_queries):
            lat, lon = _jitter(rng, *anchor)
            rec_id = f"tgt_p{p:04d}_q{v}"
            emit(rec_id, lat, lon, "target", "test_query",
                 _target_map(rng, signatures[p], clutter, style, cfg))
            pair_rows.append({"query_id": rec_id, "relevant_ids": gallery_by_place[p]})

    write_manifest(records, out_dir / "manifest.jsonl")
    with open(out_dir / "pairs.jsonl", "w", encoding="utf-8") as fh:
        for row in pair_rows:
            fh.write(json.dumps(row) + "\n")
    return DatasetIndex(out_dir, records)
