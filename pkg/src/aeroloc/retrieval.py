"""Place recognition over the rendered database.

A query image is embedded into a compact global descriptor and matched
against database descriptors by Euclidean distance (equivalent to cosine
ordering on unit vectors). Before the distance search, database entries can
be pre-filtered by the vehicle's rotation prior: an entry survives only if
each of its stored (roll, yaw, pitch) angles lies within an angular gate of
the prior's extracted angles, wrapped on the circle.

The built-in descriptor is a gradient-orientation histogram: the image is
split into a 16x16 cell grid, each cell contributes an 8-bin magnitude-
weighted orientation histogram, and the concatenated 2048-d vector is
square-root compressed, L2-normalized, and projected to 512 dimensions by a
fixed seeded orthogonal projection (then renormalized). Descriptors computed
elsewhere can be ingested from text files instead.

Retrieval correctness for benchmarks is decided by the view-overlap oracle:
the fraction of one view's valid-depth pixels that land inside the other
view at a depth consistent with its own depth map.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geom, scene
from .errors import AeroLocError, ParseError
from .geom import RotationAngles, SensorPrior
from .scene import RenderedView
from .viewgen import ViewRecord

logger = logging.getLogger(__name__)

DESCRIPTOR_DIM = 512
_GRID_CELLS = 16
_ORI_BINS = 8
_PROJECTION_SEED = 0x5EED0C11


class EmptyImage(AeroLocError):
    """Descriptor requested for an empty raster."""


class EmptyCandidates(AeroLocError):
    """Top-k search over an empty candidate set."""


class NoValidDepth(AeroLocError):
    """Overlap undefined: the source view has no valid sampled depth."""


class EmptyResults(AeroLocError):
    """Metrics requested over an empty result set."""


@dataclass(frozen=True)
class GlobalDescriptor:
    """Fixed-length unit-norm embedding of one image."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("descriptor has non-finite entries")
        if abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise ValueError("descriptor must be unit L2 norm")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def distance(self, other: "GlobalDescriptor") -> float:
        return float(np.linalg.norm(self.values - other.values))


_projection_cache: dict[int, np.ndarray] = {}


def _projection(input_dim: int) -> np.ndarray:
    """Fixed orthogonal (input_dim, DESCRIPTOR_DIM) projection, seeded once."""
    P = _projection_cache.get(input_dim)
    if P is None:
        rng = np.random.default_rng(_PROJECTION_SEED)
        g = rng.normal(size=(input_dim, DESCRIPTOR_DIM))
        q, r = np.linalg.qr(g)
        P = q * np.sign(np.diag(r))
        _projection_cache[input_dim] = P
    return P


def _unit_fallback() -> np.ndarray:
    e1 = np.zeros(DESCRIPTOR_DIM)
    e1[0] = 1.0
    return e1


def compute_descriptor(rgb: np.ndarray) -> GlobalDescriptor:
    """Embed a grayscale or RGB raster. Constant images map to a fixed unit
    vector (the degenerate-input rule)."""
    img = np.asarray(rgb)
    if img.size == 0:
        raise EmptyImage("cannot embed an empty raster")
    if img.ndim == 3:
        img = img.mean(axis=2)
    img = img.astype(np.float64) / 255.0
    h, w = img.shape

    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    if mag.max() <= 1e-12:
        return GlobalDescriptor(_unit_fallback())
    ori = np.arctan2(gy, gx)  # [-pi, pi)
    obin = np.minimum((ori + np.pi) / (2.0 * np.pi / _ORI_BINS), _ORI_BINS - 1e-9)
    obin = obin.astype(np.int64)

    rows = np.minimum(np.arange(h) * _GRID_CELLS // h, _GRID_CELLS - 1)
    cols = np.minimum(np.arange(w) * _GRID_CELLS // w, _GRID_CELLS - 1)
    cell = rows[:, None] * _GRID_CELLS + cols[None, :]
    idx = cell * _ORI_BINS + obin
    hist = np.bincount(idx.ravel(), weights=mag.ravel(),
                       minlength=_GRID_CELLS * _GRID_CELLS * _ORI_BINS)

    hist = np.sqrt(hist)
    n = np.linalg.norm(hist)
    if n < 1e-12:
        return GlobalDescriptor(_unit_fallback())
    hist /= n
    v = _projection(hist.shape[0]).T @ hist
    n = np.linalg.norm(v)
    if n < 1e-12:
        return GlobalDescriptor(_unit_fallback())
    return GlobalDescriptor(v / n)


@dataclass(frozen=True)
class IndexEntry:
    name: str
    descriptor: GlobalDescriptor
    angles: RotationAngles
    record: ViewRecord | None = None


@dataclass
class RetrievalIndex:
    """Immutable store of database descriptors plus per-image render angles."""

    entries: list[IndexEntry] = field(default_factory=list)

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("index entry names must be unique")
        dims = {e.descriptor.values.shape[0] for e in self.entries}
        if len(dims) > 1:
            raise ValueError("all descriptors must share one dimension")

    def __len__(self):
        return len(self.entries)

    @staticmethod
    def build(records: list[ViewRecord], descriptors: dict[str, GlobalDescriptor]) -> "RetrievalIndex":
        entries = [IndexEntry(name=r.name, descriptor=descriptors[r.name],
                              angles=r.angles, record=r) for r in records]
        return RetrievalIndex(entries=entries)


@dataclass(frozen=True)
class PrefilterResult:
    entries: list[IndexEntry]
    fail_open: bool = False


def prefilter_by_rotation(prior: SensorPrior, index: RetrievalIndex,
                          gamma_o_deg: float = 30.0) -> PrefilterResult:
    """Keep entries whose stored angles all lie within gamma_o of the prior.

    Differences are wrapped; a gimbal-locked prior fails open and returns
    the whole index, flagged.
    """
    try:
        pa = prior.extracted_angles()
    except geom.GimbalLock:
        logger.warning("rotation prior at gimbal lock: pre-filter disabled")
        return PrefilterResult(entries=list(index.entries), fail_open=True)
    kept = []
    for e in index.entries:
        dr = abs(geom.angle_diff_deg(pa.roll, e.angles.roll))
        dy = abs(geom.angle_diff_deg(pa.yaw, e.angles.yaw))
        dp = abs(geom.angle_diff_deg(pa.pitch, e.angles.pitch))
        if dr <= gamma_o_deg and dy <= gamma_o_deg and dp <= gamma_o_deg:
            kept.append(e)
    return PrefilterResult(entries=kept, fail_open=False)


def query_topk(query: GlobalDescriptor, candidates: list[IndexEntry],
               k: int) -> list[tuple[str, float]]:
    """Rank candidates by ascending descriptor distance, ties by name.

    Returns min(k, len(candidates)) (name, distance) pairs.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not candidates:
        raise EmptyCandidates("no candidates to rank")
    q = query.values
    mat = np.stack([e.descriptor.values for e in candidates])
    dists = np.linalg.norm(mat - q, axis=1)
    order = sorted(range(len(candidates)), key=lambda i: (dists[i], candidates[i].name))
    return [(candidates[i].name, float(dists[i])) for i in order[:k]]


def overlap_percentage(a: RenderedView, b: RenderedView, stride: int = 4,
                       depth_tol: float = 0.03) -> float:
    """Fraction of a's valid sampled pixels that transform consistently into b.

    Pixels are sampled on a stride grid, lifted through a's depth, projected
    into b, and counted when they land inside b's raster with a depth within
    depth_tol (relative) of b's own depth there. One-directional by design.
    """
    h, w = a.depth.shape
    ys, xs = np.mgrid[0:h:stride, 0:w:stride]
    d = a.depth[ys.ravel(), xs.ravel()]
    valid = d > 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise NoValidDepth("source view has no valid depth samples")
    px = np.stack([xs.ravel()[valid], ys.ravel()[valid]], axis=1).astype(np.float64)
    world = geom.unproject_points(a.pose, a.intrinsics, px, d[valid])
    px_b, z_b, in_front = geom.project_points(b.pose, b.intrinsics, world)
    # Epsilon-tolerant bounds so border pixels survive projection round-off.
    eps = 1e-6
    bw, bh = b.intrinsics.width, b.intrinsics.height
    xb = np.nan_to_num(px_b[:, 0], nan=-1.0)
    yb = np.nan_to_num(px_b[:, 1], nan=-1.0)
    ok = in_front & (xb >= -eps) & (xb <= bw - 1 + eps) \
        & (yb >= -eps) & (yb <= bh - 1 + eps)
    depth_b = np.zeros(ok.shape)
    sampled_ok = np.zeros(ok.shape, dtype=bool)
    if np.any(ok):
        vals, good = scene.sample_depth_bilinear(
            b.depth, np.clip(xb[ok], 0, bw - 1), np.clip(yb[ok], 0, bh - 1))
        depth_b[ok] = vals
        sampled_ok[ok] = good
    consistent = ok & sampled_ok & (np.abs(z_b - depth_b) <= depth_tol * np.abs(z_b))
    return float(consistent.sum()) / float(n_valid)


def retrieval_metrics(results: dict[str, list[str]],
                      correct: dict[str, set[str]],
                      k: int) -> tuple[float, float]:
    """(R@k, P@k) percentages over per-query ranked lists.

    R@k: share of queries with at least one correct name in the top k.
    P@k: mean share of correct names among the top k (short lists count the
    absent ranks as misses).
    """
    if not results:
        raise EmptyResults("no queries")
    hits = 0
    prec_sum = 0.0
    for qname, ranked in results.items():
        good = correct.get(qname, set())
        top = ranked[:k]
        n_correct = sum(1 for name in top if name in good)
        hits += 1 if n_correct > 0 else 0
        prec_sum += n_correct / float(k)
    n = len(results)
    return 100.0 * hits / n, 100.0 * prec_sum / n


def save_descriptors(path, descriptors: dict[str, GlobalDescriptor]):
    """Text format: one line per image, `name dim v1 ... vdim`."""
    lines = []
    for name, desc in descriptors.items():
        vals = " ".join(format(v, ".9g") for v in desc.values)
        lines.append(f"{name} {desc.values.shape[0]} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_descriptors(path) -> dict[str, GlobalDescriptor]:
    """Ingest external descriptors; off-norm vectors are renormalized with a
    warning, as promised by the file contract."""
    path = Path(path)
    out: dict[str, GlobalDescriptor] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 3:
            raise ParseError(path, lineno, "expected `name dim v1 ... vdim`")
        name = parts[0]
        try:
            dim = int(parts[1])
            vals = np.array([float(v) for v in parts[2:]])
        except ValueError as e:
            raise ParseError(path, lineno, str(e)) from None
        if vals.shape[0] != dim:
            raise ParseError(path, lineno,
                             f"declared dim {dim} but {vals.shape[0]} values")
        n = np.linalg.norm(vals)
        if n < 1e-12:
            raise ParseError(path, lineno, "zero-norm descriptor")
        if abs(n - 1.0) > 1e-3:
            logger.warning("%s:%d: descriptor norm %.6f, renormalizing",
                           path, lineno, n)
        out[name] = GlobalDescriptor(vals / n)
    return out


def write_retrieval_report(path, rows: list[dict]):
    """CSV: query,rank,name,distance,prefiltered_count,correct."""
    lines = ["query,rank,name,distance,prefiltered_count,correct"]
    for r in rows:
        correct = r.get("correct")
        correct_s = "" if correct is None else str(int(correct))
        lines.append(f"{r['query']},{r['rank']},{r['name']},"
                     f"{r['distance']:.6f},{r['prefiltered_count']},{correct_s}")
    Path(path).write_text("\n".join(lines) + "\n")
