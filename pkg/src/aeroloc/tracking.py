"""Ground-target geolocalization from a localized two-camera rig.

The wide-angle camera's pose comes out of the localization pipeline; a
calibrated fixed transform maps it to the zoom camera, whose detected
target pixel (bounding-box bottom center, the object's ground contact) is
cast as a ray and intersected with the elevation model.

Observation file: text, one line per sample `timestamp px py`, '#'
comments. Track output CSV: `timestamp,x,y,z`.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AeroLocError, ParseError
from .geom import Intrinsics, Pose
from .pnp import PoseEstimate
from .scene import Heightfield, raycast


class RayMiss(AeroLocError):
    """The target ray leaves the elevation model without touching ground."""


class NoMatchedSamples(AeroLocError):
    """No estimated/truth sample pair within the matching window."""


@dataclass(frozen=True)
class CameraRig:
    """Wide-angle localization camera plus zoom detection camera.

    zoom_from_wide composes with a wide camera-from-world pose to give the
    zoom camera-from-world pose.
    """

    wide: Intrinsics
    zoom: Intrinsics
    zoom_from_wide: Pose


@dataclass(frozen=True)
class TargetObservation:
    timestamp: float
    zoom_pixel: tuple[float, float]
    wide_pose: Pose | PoseEstimate

    def pose(self) -> Pose:
        return self.wide_pose.pose if isinstance(self.wide_pose, PoseEstimate) else self.wide_pose


@dataclass
class TargetTrack:
    timestamps: np.ndarray
    points: np.ndarray  # (n, 3) world meters

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if t.shape[0] != p.shape[0]:
            raise ValueError("timestamps and points must align")
        if t.shape[0] > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("timestamps must be strictly increasing")
        self.timestamps = t
        self.points = p

    def __len__(self):
        return len(self.timestamps)

    def save_csv(self, path):
        lines = ["timestamp,x,y,z"]
        for t, p in zip(self.timestamps, self.points):
            lines.append(f"{t:.6f},{p[0]:.6f},{p[1]:.6f},{p[2]:.6f}")
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def load_csv(path) -> "TargetTrack":
        path = Path(path)
        ts, pts = [], []
        for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("timestamp"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ParseError(path, lineno, f"expected 4 columns, got {len(parts)}")
            try:
                ts.append(float(parts[0]))
                pts.append([float(v) for v in parts[1:]])
            except ValueError as e:
                raise ParseError(path, lineno, str(e)) from None
        return TargetTrack(np.array(ts), np.array(pts))


def zoom_pose(obs: TargetObservation, rig: CameraRig) -> Pose:
    return rig.zoom_from_wide.compose(obs.pose())


def localize_target(obs: TargetObservation, rig: CameraRig,
                    dem: Heightfield) -> np.ndarray:
    """World position of the observed target: cast the zoom-pixel ray onto
    the elevation model. Raises RayMiss when the ray never touches it."""
    px, py = obs.zoom_pixel
    K = rig.zoom
    if not (0 <= px <= K.width - 1 and 0 <= py <= K.height - 1):
        raise ValueError(f"zoom pixel ({px}, {py}) outside image bounds")
    pose = zoom_pose(obs, rig)
    d_cam = np.array([(px - K.cx) / K.fx, (py - K.cy) / K.fy, 1.0])
    d_cam /= np.linalg.norm(d_cam)
    d_world = pose.rotation.T @ d_cam
    hit = raycast(dem, pose.center(), d_world)
    if hit is None:
        raise RayMiss(f"target ray from pixel ({px}, {py}) misses the elevation model")
    return hit


@dataclass(frozen=True)
class TrackErrorStats:
    per_sample: np.ndarray
    mean: float
    max: float
    n_matched: int
    n_unmatched: int


def track_error(estimated: TargetTrack, truth: TargetTrack,
                max_dt: float = 0.5) -> TrackErrorStats:
    """Per-sample and aggregate 3D position error between two tracks.

    Estimated samples are matched to the nearest-in-time truth sample
    within max_dt seconds; unmatched samples are counted and excluded.
    """
    if len(estimated) == 0 or len(truth) == 0:
        raise NoMatchedSamples("empty track")
    errors = []
    n_unmatched = 0
    for t, p in zip(estimated.timestamps, estimated.points):
        i = int(np.argmin(np.abs(truth.timestamps - t)))
        if abs(truth.timestamps[i] - t) > max_dt:
            n_unmatched += 1
            continue
        errors.append(float(np.linalg.norm(p - truth.points[i])))
    if not errors:
        raise NoMatchedSamples(f"no sample pairs within {max_dt} s")
    arr = np.array(errors)
    return TrackErrorStats(per_sample=arr, mean=float(arr.mean()),
                           max=float(arr.max()), n_matched=len(arr),
                           n_unmatched=n_unmatched)


def load_observations(path) -> list[tuple[float, tuple[float, float]]]:
    """Observation file rows as (timestamp, (px, py))."""
    path = Path(path)
    out = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(path, lineno, f"expected `timestamp px py`, got {len(parts)} fields")
        try:
            t, px, py = (float(v) for v in parts)
        except ValueError as e:
            raise ParseError(path, lineno, str(e)) from None
        out.append((t, (px, py)))
    return out


def save_observations(path, rows):
    lines = ["# timestamp px py"]
    for t, (px, py) in rows:
        lines.append(f"{t:.6f} {px:.17g} {py:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")
