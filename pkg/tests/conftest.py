import numpy as np
import pytest

from aeroloc import geom, scene


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation from QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


def aerial_rotation(yaw_deg: float, pitch_down_deg: float) -> np.ndarray:
    """Camera-from-world rotation for a heading + downward-pitch pair.

    Yaw 0 looks along world +y, pitch 0 is horizontal, pitch 90 is nadir.
    Mirrors the database grid construction but kept independent here so
    tests do not lean on the code under test.
    """
    base = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    return geom.rot_x(pitch_down_deg) @ base @ geom.rot_z(yaw_deg)


@pytest.fixture(scope="session")
def small_scene() -> scene.Heightfield:
    spec = scene.SceneSpec(extent=240.0, amplitude=6.0, building_count=20,
                           footprint_range=(18.0, 45.0), height_range=(12.0, 30.0),
                           seed=7, cell=3.0)
    return scene.generate_scene(spec)


@pytest.fixture(scope="session")
def flat_scene() -> scene.Heightfield:
    n = 201
    return scene.Heightfield((0.0, 0.0), 1.0, np.zeros((n, n)), np.full((n, n), 0.5))


@pytest.fixture(scope="session")
def cam() -> geom.Intrinsics:
    return geom.Intrinsics(fx=140.0, fy=140.0, cx=80.0, cy=60.0, width=160, height=120)
