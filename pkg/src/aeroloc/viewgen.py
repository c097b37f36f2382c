"""Offline reference-database generation.

Lays virtual viewpoints on a translation/rotation grid over the terrain and
renders one RGB + depth pair per viewpoint. Each grid level pairs a render
altitude with a horizontal spacing; at every position one pose is emitted
per (pitch, yaw) combination, yaw sweeping the full circle.

Grid pitch labels: 0 deg points the optical axis at the horizon, 90 deg is
nadir. Yaw 0 looks along world +y and increases toward +x (east). Stored per-image
angles are always the euler extraction of the actual render pose, which is
what the retrieval pre-filter compares against.

Manifest format (text, '#' comments), one line per image:

    name qw qx qy qz tx ty tz roll yaw pitch fx fy cx cy width height rgb_path depth_path

Quaternion is camera-from-world, Hamilton convention, w first. Paths are
relative to the manifest's directory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geom, scene
from .errors import DataError, MissingFile, ParseError
from .geom import Intrinsics, Pose, RotationAngles
from .scene import Heightfield, InvalidSpec

# Pitch offset applied when a grid pose lands exactly on the euler
# singularity (horizontal view along +/- world x). 0.01 deg keeps |R31|
# clear of the 1e-9 guard while moving the view by well under a pixel.
_LOCK_NUDGE_DEG = 0.01

_BASE_CAM = np.array([[1.0, 0.0, 0.0],
                      [0.0, 0.0, -1.0],
                      [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class ViewGridSpec:
    """Database layout: (altitude, spacing) levels, pitches, yaw interval."""

    levels: tuple[tuple[float, float], ...]
    pitches: tuple[float, ...]
    yaw_interval_deg: float
    bounds: tuple[float, float, float, float]
    altitude_mode: str = "absolute"  # or "agl": height above local terrain

    def validate(self):
        if not self.levels:
            raise InvalidSpec("at least one (altitude, spacing) level required")
        for alt, spacing in self.levels:
            if not spacing > 0:
                raise InvalidSpec("horizontal interval must be positive")
        if not self.pitches:
            raise InvalidSpec("at least one pitch required")
        for p in self.pitches:
            if not 0.0 <= p <= 90.0:
                raise InvalidSpec(f"pitch {p} outside [0, 90]")
        n_yaw = 360.0 / self.yaw_interval_deg
        if self.yaw_interval_deg <= 0 or abs(n_yaw - round(n_yaw)) > 1e-9:
            raise InvalidSpec("yaw interval must divide 360 evenly")
        xmin, ymin, xmax, ymax = self.bounds
        if xmax < xmin or ymax < ymin:
            raise InvalidSpec("empty bounds")
        if self.altitude_mode not in ("absolute", "agl"):
            raise InvalidSpec(f"unknown altitude mode {self.altitude_mode!r}")

    def yaws(self) -> list[float]:
        n = int(round(360.0 / self.yaw_interval_deg))
        return [i * self.yaw_interval_deg for i in range(n)]


def paper_default_grid(bounds) -> ViewGridSpec:
    """The stock two-level database layout: 100 m / 50 m and 150 m / 75 m,
    pitches 0 and 45, yaw every 45 deg (16 views per position)."""
    return ViewGridSpec(levels=((100.0, 50.0), (150.0, 75.0)),
                        pitches=(0.0, 45.0), yaw_interval_deg=45.0,
                        bounds=tuple(float(b) for b in bounds))


def camera_rotation(yaw_deg: float, pitch_down_deg: float) -> np.ndarray:
    """Camera-from-world rotation for a heading + downward pitch.

    Pitch 0 = horizontal optical axis, 90 = nadir; yaw 0 looks along +y.
    Poses that land exactly on the euler singularity are nudged down by
    _LOCK_NUDGE_DEG so their angles stay extractable.
    """
    R = geom.rot_x(pitch_down_deg) @ _BASE_CAM @ geom.rot_z(yaw_deg)
    if abs(R[2, 0]) >= 1.0 - 1e-9:
        R = geom.rot_x(pitch_down_deg + _LOCK_NUDGE_DEG) @ _BASE_CAM @ geom.rot_z(yaw_deg)
    return R


@dataclass(frozen=True)
class Viewpoint:
    pose: Pose
    angles: RotationAngles
    level: int
    row: int
    col: int
    pitch_label: float
    yaw_label: float


def _grid_axis(lo: float, hi: float, spacing: float) -> np.ndarray:
    n = int(math.floor((hi - lo) / spacing + 1e-9)) + 1
    return lo + spacing * np.arange(n)


def generate_viewpoints(spec: ViewGridSpec,
                        terrain: Heightfield | None = None) -> list[Viewpoint]:
    """Enumerate database poses in (level, row, col, pitch, yaw) order.

    Positions run on a regular grid with the level's spacing, starting at the
    lower bounds corner (bounds edges included whenever the spacing divides
    the extent). `terrain` is only needed for agl altitude mode.
    """
    spec.validate()
    xmin, ymin, xmax, ymax = spec.bounds
    if spec.altitude_mode == "agl" and terrain is None:
        raise InvalidSpec("agl altitude mode needs the terrain heightfield")
    out: list[Viewpoint] = []
    for li, (alt, spacing) in enumerate(spec.levels):
        xs = _grid_axis(xmin, xmax, spacing)
        ys = _grid_axis(ymin, ymax, spacing)
        for row, y in enumerate(ys):
            for col, x in enumerate(xs):
                if spec.altitude_mode == "agl":
                    z = float(terrain.height_at(x, y)) + alt
                else:
                    z = alt
                for pitch in spec.pitches:
                    for yaw in spec.yaws():
                        R = camera_rotation(yaw, pitch)
                        pose = Pose.from_center(R, (x, y, z))
                        angles = geom.euler_from_rotation(R)
                        out.append(Viewpoint(pose=pose, angles=angles, level=li,
                                             row=row, col=col, pitch_label=pitch,
                                             yaw_label=yaw))
    return out


@dataclass(frozen=True)
class ViewRecord:
    """One database image: pose, extracted angles, intrinsics, file paths."""

    name: str
    pose: Pose
    angles: RotationAngles
    intrinsics: Intrinsics
    rgb_path: str
    depth_path: str


@dataclass
class DatabaseManifest:
    records: list[ViewRecord] = field(default_factory=list)
    root: Path = Path(".")

    def names(self) -> list[str]:
        return [r.name for r in self.records]

    def rgb_file(self, record: ViewRecord) -> Path:
        return self.root / record.rgb_path

    def depth_file(self, record: ViewRecord) -> Path:
        return self.root / record.depth_path

    def save(self, path):
        path = Path(path)
        lines = ["# name qw qx qy qz tx ty tz roll yaw pitch fx fy cx cy"
                 " width height rgb_path depth_path"]
        for r in self.records:
            q = geom.quat_from_rotation(r.pose.rotation)
            t = r.pose.translation
            K = r.intrinsics
            nums = list(q) + list(t) + [r.angles.roll, r.angles.yaw, r.angles.pitch,
                                        K.fx, K.fy, K.cx, K.cy]
            fields = [r.name] + [format(v, ".17g") for v in nums] \
                + [str(K.width), str(K.height), r.rgb_path, r.depth_path]
            lines.append(" ".join(fields))
        path.write_text("\n".join(lines) + "\n")

    @staticmethod
    def load(path, check_files: bool = True) -> "DatabaseManifest":
        path = Path(path)
        if not path.exists():
            raise MissingFile([path])
        manifest = DatabaseManifest(root=path.parent)
        seen = set()
        missing = []
        for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 19:
                raise ParseError(path, lineno, f"expected 19 fields, got {len(parts)}")
            name = parts[0]
            if name in seen:
                raise ParseError(path, lineno, f"duplicate image name {name!r}")
            seen.add(name)
            try:
                nums = [float(v) for v in parts[1:15]]
                width, height = int(parts[15]), int(parts[16])
            except ValueError as e:
                raise ParseError(path, lineno, str(e)) from None
            q = np.array(nums[0:4])
            qn = np.linalg.norm(q)
            if abs(qn - 1.0) > 1e-3:
                import logging
                logging.getLogger(__name__).warning(
                    "%s:%d: quaternion norm %.6f, renormalizing", path, lineno, qn)
            try:
                pose = Pose(geom.rotation_from_quat(q), nums[4:7])
                K = Intrinsics(fx=nums[10], fy=nums[11], cx=nums[12], cy=nums[13],
                               width=width, height=height)
            except ValueError as e:
                raise ParseError(path, lineno, str(e)) from None
            angles = RotationAngles(roll=nums[7], yaw=nums[8], pitch=nums[9])
            rec = ViewRecord(name=name, pose=pose, angles=angles, intrinsics=K,
                             rgb_path=parts[17], depth_path=parts[18])
            if check_files:
                for p in (manifest.rgb_file(rec), manifest.depth_file(rec)):
                    if not p.exists():
                        missing.append(p)
            manifest.records.append(rec)
        if missing:
            raise MissingFile(missing)
        return manifest


def render_database(hf: Heightfield, spec: ViewGridSpec, K: Intrinsics,
                    out_dir, sun_dir=(0.35, 0.2, 0.9),
                    jobs: int = 1) -> DatabaseManifest:
    """Render every grid viewpoint and write the manifest to out_dir.

    Raises InvalidSpec when an absolute level altitude is not above the
    highest terrain inside the bounds.
    """
    spec.validate()
    out_dir = Path(out_dir)
    xmin, ymin, xmax, ymax = spec.bounds
    bxmin, bymin, bxmax, bymax = hf.bounds
    cx0 = max(xmin, bxmin)
    cy0 = max(ymin, bymin)
    cx1 = min(xmax, bxmax)
    cy1 = min(ymax, bymax)
    if spec.altitude_mode == "absolute" and cx1 > cx0 and cy1 > cy0:
        i0 = int((cx0 - hf.origin[0]) / hf.cell)
        i1 = int(np.ceil((cx1 - hf.origin[0]) / hf.cell))
        j0 = int((cy0 - hf.origin[1]) / hf.cell)
        j1 = int(np.ceil((cy1 - hf.origin[1]) / hf.cell))
        peak = float(hf.heights[i0:i1 + 1, j0:j1 + 1].max())
        for alt, _ in spec.levels:
            if alt <= peak:
                raise InvalidSpec(
                    f"level altitude {alt} m not above terrain peak {peak:.1f} m")

    viewpoints = generate_viewpoints(spec, terrain=hf)
    out_dir.mkdir(parents=True, exist_ok=True)

    def render_one(item):
        idx, vp = item
        name = (f"v{idx:05d}_L{vp.level}_r{vp.row:03d}_c{vp.col:03d}"
                f"_p{int(round(vp.pitch_label)):02d}_y{int(round(vp.yaw_label)):03d}")
        view = scene.render_view(hf, vp.pose, K, sun_dir=sun_dir)
        rgb_rel = f"{name}.pgm"
        depth_rel = f"{name}.uavd"
        scene.save_pgm(out_dir / rgb_rel, view.rgb)
        scene.save_depth(out_dir / depth_rel, view.depth)
        return ViewRecord(name=name, pose=vp.pose, angles=vp.angles, intrinsics=K,
                          rgb_path=rgb_rel, depth_path=depth_rel)

    items = list(enumerate(viewpoints))
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(render_one, items))
    else:
        records = [render_one(it) for it in items]

    manifest = DatabaseManifest(records=records, root=out_dir)
    manifest.save(out_dir / "manifest.txt")
    return manifest
