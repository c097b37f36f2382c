"""Dataset layout, configuration files, and query generation.

Configs are flat `key = value` text with '#' comments and dotted keys, e.g.

    retrieval.topk = 3
    retrieval.gamma_o_deg = 30
    ransac.gamma_eps_deg = 2
    ransac.seed = 0
    matching.max_keypoints = 2048
    views.levels = 100:50,150:75
    views.pitches = 0,45
    views.yaw_interval_deg = 45

A dataset is a config pointing at a scene file, a rendered database
manifest, and a query manifest. Query manifest lines are

    name rgb_path fx fy cx cy width height [gt=qw,qx,qy,qz,tx,ty,tz] [prior=qw,qx,qy,qz] [depth=path]

with '#' comments; gt and prior quaternions are camera-from-world,
Hamilton, w first, normalized on load (with a warning when off by more
than 1e-3).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import geom, scene, viewgen
from .errors import MissingFile, ParseError
from .geom import Intrinsics, Pose, RotationAngles, SensorPrior
from .scene import Heightfield
from .viewgen import DatabaseManifest

logger = logging.getLogger(__name__)


def parse_config(path) -> dict[str, str]:
    path = Path(path)
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(path, lineno, "expected `key = value`")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_config(path, items: dict[str, str]):
    lines = [f"{k} = {v}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_levels(text: str) -> tuple[tuple[float, float], ...]:
    levels = []
    for part in text.split(","):
        alt, spacing = part.split(":")
        levels.append((float(alt), float(spacing)))
    return tuple(levels)


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs of the online pipeline plus the database layout defaults."""

    retrieval_topk: int = 3
    retrieval_gamma_o_deg: float = 30.0
    ransac_gamma_eps_deg: float = 2.0
    ransac_seed: int = 0
    ransac_max_iters: int = 2048
    ransac_reproj_px: float = 5.0
    ransac_confidence: float = 0.999
    ransac_min_inlier_ratio: float = 0.5
    ransac_reject_by_gravity: bool = False
    matching_max_keypoints: int = 2048
    matching_ratio: float = 0.9
    views_levels: tuple[tuple[float, float], ...] = ((100.0, 50.0), (150.0, 75.0))
    views_pitches: tuple[float, ...] = (0.0, 45.0)
    views_yaw_interval_deg: float = 45.0
    use_prior: bool = True

    @staticmethod
    def from_items(items: dict[str, str]) -> "PipelineConfig":
        cfg = PipelineConfig()
        mapping = {
            "retrieval.topk": ("retrieval_topk", int),
            "retrieval.gamma_o_deg": ("retrieval_gamma_o_deg", float),
            "ransac.gamma_eps_deg": ("ransac_gamma_eps_deg", float),
            "ransac.seed": ("ransac_seed", int),
            "ransac.max_iters": ("ransac_max_iters", int),
            "ransac.reproj_px": ("ransac_reproj_px", float),
            "ransac.confidence": ("ransac_confidence", float),
            "ransac.min_inlier_ratio": ("ransac_min_inlier_ratio", float),
            "ransac.reject_by_gravity": ("ransac_reject_by_gravity", _parse_bool),
            "matching.max_keypoints": ("matching_max_keypoints", int),
            "matching.ratio": ("matching_ratio", float),
            "views.levels": ("views_levels", _parse_levels),
            "views.pitches": ("views_pitches", _parse_floats),
            "views.yaw_interval_deg": ("views_yaw_interval_deg", float),
            "pipeline.use_prior": ("use_prior", _parse_bool),
        }
        updates = {}
        for key, value in items.items():
            if key in mapping:
                attr, conv = mapping[key]
                updates[attr] = conv(value)
        return replace(cfg, **updates)

    @staticmethod
    def load(path) -> "PipelineConfig":
        return PipelineConfig.from_items(parse_config(path))


def _parse_bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class QueryRecord:
    name: str
    rgb_path: str
    intrinsics: Intrinsics
    gt_pose: Pose | None = None
    prior: SensorPrior | None = None
    depth_path: str | None = None


def _fmt_floats(vals) -> str:
    return ",".join(format(float(v), ".17g") for v in vals)


def save_queries(path, records: list[QueryRecord]):
    lines = ["# name rgb_path fx fy cx cy width height [gt=...] [prior=...] [depth=path]"]
    for r in records:
        K = r.intrinsics
        parts = [r.name, r.rgb_path,
                 format(K.fx, ".17g"), format(K.fy, ".17g"),
                 format(K.cx, ".17g"), format(K.cy, ".17g"),
                 str(K.width), str(K.height)]
        if r.gt_pose is not None:
            q = geom.quat_from_rotation(r.gt_pose.rotation)
            parts.append("gt=" + _fmt_floats(list(q) + list(r.gt_pose.translation)))
        if r.prior is not None:
            parts.append("prior=" + _fmt_floats(geom.quat_from_rotation(r.prior.rotation)))
        if r.depth_path is not None:
            parts.append("depth=" + r.depth_path)
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n")


def _quat_to_rotation(path, lineno, vals) -> np.ndarray:
    q = np.asarray(vals, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ParseError(path, lineno, "zero quaternion")
    if abs(n - 1.0) > 1e-3:
        logger.warning("%s:%d: quaternion norm %.6f, renormalizing", path, lineno, n)
    return geom.rotation_from_quat(q)


def load_queries(path) -> list[QueryRecord]:
    path = Path(path)
    if not path.exists():
        raise MissingFile([path])
    out = []
    seen = set()
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 8:
            raise ParseError(path, lineno, "expected at least 8 fields")
        name = parts[0]
        if name in seen:
            raise ParseError(path, lineno, f"duplicate query name {name!r}")
        seen.add(name)
        try:
            fx, fy, cx, cy = (float(v) for v in parts[2:6])
            width, height = int(parts[6]), int(parts[7])
            K = Intrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)
        except ValueError as e:
            raise ParseError(path, lineno, str(e)) from None
        gt_pose = None
        prior = None
        depth_path = None
        for extra in parts[8:]:
            if "=" not in extra:
                raise ParseError(path, lineno, f"unrecognized field {extra!r}")
            key, value = extra.split("=", 1)
            if key == "gt":
                vals = [float(v) for v in value.split(",")]
                if len(vals) != 7:
                    raise ParseError(path, lineno, "gt needs 7 values")
                gt_pose = Pose(_quat_to_rotation(path, lineno, vals[:4]), vals[4:])
            elif key == "prior":
                vals = [float(v) for v in value.split(",")]
                if len(vals) != 4:
                    raise ParseError(path, lineno, "prior needs 4 values")
                prior = SensorPrior(rotation=_quat_to_rotation(path, lineno, vals))
            elif key == "depth":
                depth_path = value
            else:
                raise ParseError(path, lineno, f"unknown field {key!r}")
        out.append(QueryRecord(name=name, rgb_path=parts[1], intrinsics=K,
                               gt_pose=gt_pose, prior=prior, depth_path=depth_path))
    return out


@dataclass
class DatasetManifest:
    """A scene, its rendered database, and the query set."""

    root: Path
    scene_path: Path
    database: DatabaseManifest
    queries: list[QueryRecord] = field(default_factory=list)
    queries_dir: Path = Path(".")

    def heightfield(self) -> Heightfield:
        return Heightfield.load(self.scene_path)

    def query_rgb(self, q: QueryRecord) -> Path:
        return self.queries_dir / q.rgb_path

    def query_depth(self, q: QueryRecord) -> Path | None:
        return None if q.depth_path is None else self.queries_dir / q.depth_path


def load_manifest(path) -> DatasetManifest:
    """Load and eagerly validate a dataset config.

    Raises MissingFile listing every absent referenced file, and ParseError
    on duplicate names within or across the database and query sets.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFile([path])
    items = parse_config(path)
    root = path.parent
    for key in ("scene", "database", "queries"):
        if key not in items:
            raise ParseError(path, 0, f"dataset config missing `{key}`")
    scene_path = root / items["scene"]
    db_path = root / items["database"]
    queries_path = root / items["queries"]

    missing = [p for p in (scene_path, db_path, queries_path) if not p.exists()]
    if missing:
        raise MissingFile(missing)

    database = DatabaseManifest.load(db_path)
    queries = load_queries(queries_path)
    queries_dir = queries_path.parent

    names = database.names()
    all_names = set(names)
    for q in queries:
        if q.name in all_names:
            raise ParseError(queries_path, 0,
                             f"query name {q.name!r} collides with a database image")
        all_names.add(q.name)

    missing = []
    for q in queries:
        rgb = queries_dir / q.rgb_path
        if not rgb.exists():
            missing.append(rgb)
        if q.depth_path is not None and not (queries_dir / q.depth_path).exists():
            missing.append(queries_dir / q.depth_path)
    if missing:
        raise MissingFile(missing)
    return DatasetManifest(root=root, scene_path=scene_path, database=database,
                           queries=queries, queries_dir=queries_dir)


def save_dataset_config(path, scene_rel: str, database_rel: str, queries_rel: str):
    write_config(path, {"scene": scene_rel, "database": database_rel,
                        "queries": queries_rel})


def generate_queries(hf: Heightfield, K: Intrinsics, out_dir, count: int,
                     seed: int, alt_range=(50.0, 200.0), pitch_range=(15.0, 70.0),
                     prior_sigma_deg: float = 2.0, margin_frac: float = 0.15,
                     min_valid_depth: float = 0.4,
                     sun_dir=(0.35, 0.2, 0.9)) -> list[QueryRecord]:
    """Render a seeded random query set with ground truth and noisy priors.

    Poses are sampled uniformly: position inside the inset scene bounds,
    altitude above local terrain, downward pitch, and heading. Views whose
    valid-depth fraction falls below min_valid_depth (mostly sky) are
    redrawn. Priors perturb the ground-truth angles by per-axis Gaussian
    noise with prior_sigma_deg; sigma 0 gives the exact rotation.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    xmin, ymin, xmax, ymax = hf.bounds
    mx = (xmax - xmin) * margin_frac
    my = (ymax - ymin) * margin_frac

    records = []
    for qi in range(count):
        view = None
        pose = None
        for _ in range(64):
            x = rng.uniform(xmin + mx, xmax - mx)
            y = rng.uniform(ymin + my, ymax - my)
            alt = rng.uniform(*alt_range)
            pitch = rng.uniform(*pitch_range)
            yaw = rng.uniform(0.0, 360.0)
            z = float(hf.height_at(x, y)) + alt
            R = viewgen.camera_rotation(yaw, pitch)
            cand_pose = Pose.from_center(R, (x, y, z))
            cand = scene.render_view(hf, cand_pose, K, sun_dir=sun_dir)
            if float(np.mean(cand.depth > 0)) >= min_valid_depth:
                view = cand
                pose = cand_pose
                break
        if view is None:
            raise RuntimeError("could not sample a query with enough terrain in view")
        name = f"q{qi:05d}"
        rgb_rel = f"{name}.pgm"
        depth_rel = f"{name}.uavd"
        scene.save_pgm(out_dir / rgb_rel, view.rgb)
        scene.save_depth(out_dir / depth_rel, view.depth)

        angles = geom.euler_from_rotation(pose.rotation)
        noisy = RotationAngles(
            roll=angles.roll + rng.normal(0.0, prior_sigma_deg),
            yaw=angles.yaw + rng.normal(0.0, prior_sigma_deg),
            pitch=angles.pitch + rng.normal(0.0, prior_sigma_deg))
        prior = SensorPrior(rotation=geom.rotation_from_angles(noisy))
        records.append(QueryRecord(name=name, rgb_path=rgb_rel, intrinsics=K,
                                   gt_pose=pose, prior=prior, depth_path=depth_rel))
    save_queries(out_dir / "queries.txt", records)
    return records
