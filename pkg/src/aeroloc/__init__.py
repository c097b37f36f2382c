"""Synthetic-view 6-DoF aerial localization over heightfield terrain.

Offline: generate a procedural scene, lay a virtual-viewpoint grid over it,
and render an RGB + depth reference database. Online: retrieve database
views for a query image (optionally pre-filtered by the vehicle's rotation
prior), match local features, lift them to 2D-3D correspondences through
the reference depth, and recover the camera pose with a gravity-guided
PnP RANSAC. A calibrated zoom camera's detections are then ray-traced onto
the terrain for ground-target geolocalization.
"""

from .geom import Intrinsics, Pose, RotationAngles, SensorPrior
from .scene import Heightfield, RenderedView, SceneSpec
from .viewgen import DatabaseManifest, ViewGridSpec

__all__ = [
    "Intrinsics",
    "Pose",
    "RotationAngles",
    "SensorPrior",
    "Heightfield",
    "RenderedView",
    "SceneSpec",
    "DatabaseManifest",
    "ViewGridSpec",
]

__version__ = "0.1.0"
