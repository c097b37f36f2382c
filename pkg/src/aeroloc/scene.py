"""Heightfield terrain: procedural synthesis, ray casting, and rendering.

The Heightfield doubles as the dense surface model rendered into the
reference database and as the elevation model that ground-target rays are
intersected with. Rays are intersected against the bilinearly interpolated
surface by fixed-step marching (half a cell per step) followed by bisection,
so hits agree with `height_at` to well under a millimeter at terrain scale.

File formats owned by this module:

* Heightfield, magic ``UAVH``: little-endian u32 nx, u32 ny, f64 x0, f64 y0,
  f64 cell, then nx*ny f32 heights (row-major, x index outermost), then
  nx*ny f32 albedo.
* Depth raster, magic ``UAVD``: u32 width, u32 height, then width*height
  f32 row-major; 0.0 marks pixels with no surface hit.
* Grayscale images: binary 8-bit PGM (P5); 3-channel rasters would use PPM
  (P6), though the renderer itself emits grayscale.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numba
import numpy as np

from .errors import AeroLocError, DataError
from .geom import Intrinsics, Pose

NEAR_PLANE = 1e-3
_BISECT_ITERS = 40


class InvalidSpec(AeroLocError):
    """Scene or view-grid specification violates its invariants."""


class OutOfBounds(AeroLocError):
    """Query point lies outside the heightfield's convex bounds."""


@dataclass(frozen=True)
class SceneSpec:
    """Procedural scene parameters. Same seed -> bit-identical heightfield."""

    extent: float = 300.0
    amplitude: float = 6.0
    building_count: int = 25
    footprint_range: tuple[float, float] = (18.0, 45.0)
    height_range: tuple[float, float] = (12.0, 35.0)
    seed: int = 0
    cell: float = 3.0

    def validate(self):
        if not self.extent > 0:
            raise InvalidSpec("extent must be positive")
        if self.amplitude < 0:
            raise InvalidSpec("amplitude must be non-negative")
        if self.building_count < 0:
            raise InvalidSpec("building count must be non-negative")
        for lo, hi in (self.footprint_range, self.height_range):
            if lo < 0 or hi < lo:
                raise InvalidSpec("ranges must be non-negative and ordered")
        if not self.cell > 0:
            raise InvalidSpec("cell size must be positive")


@dataclass(frozen=True)
class Heightfield:
    """Gridded surface model with bilinear interpolation between nodes.

    Node (i, j) sits at world (x0 + i*cell, y0 + j*cell); `heights` and
    `albedo` have shape (nx, ny) with the x index first.
    """

    origin: tuple[float, float]
    cell: float
    heights: np.ndarray
    albedo: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.heights, dtype=np.float64)
        a = np.asarray(self.albedo, dtype=np.float64)
        if h.ndim != 2 or h.shape[0] < 2 or h.shape[1] < 2:
            raise InvalidSpec("heights must be a grid of at least 2x2 nodes")
        if a.shape != h.shape:
            raise InvalidSpec("albedo grid must match heights grid")
        if not np.all(np.isfinite(h)):
            raise InvalidSpec("heights must be finite")
        if not self.cell > 0:
            raise InvalidSpec("cell must be positive")
        h.flags.writeable = False
        a.flags.writeable = False
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "albedo", a)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def nx(self) -> int:
        return self.heights.shape[0]

    @property
    def ny(self) -> int:
        return self.heights.shape[1]

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) of the interpolatable region."""
        x0, y0 = self.origin
        return (x0, y0, x0 + (self.nx - 1) * self.cell, y0 + (self.ny - 1) * self.cell)

    def contains(self, x, y):
        xmin, ymin, xmax, ymax = self.bounds
        return (np.asarray(x) >= xmin) & (np.asarray(x) <= xmax) \
            & (np.asarray(y) >= ymin) & (np.asarray(y) <= ymax)

    def _interp(self, grid: np.ndarray, x, y):
        """Bilinear interpolation; callers guarantee (x, y) inside bounds."""
        x0, y0 = self.origin
        fx = (np.asarray(x, dtype=np.float64) - x0) / self.cell
        fy = (np.asarray(y, dtype=np.float64) - y0) / self.cell
        i0 = np.clip(np.floor(fx).astype(np.int64), 0, self.nx - 2)
        j0 = np.clip(np.floor(fy).astype(np.int64), 0, self.ny - 2)
        tx = fx - i0
        ty = fy - j0
        g00 = grid[i0, j0]
        g10 = grid[i0 + 1, j0]
        g01 = grid[i0, j0 + 1]
        g11 = grid[i0 + 1, j0 + 1]
        return (g00 * (1 - tx) * (1 - ty) + g10 * tx * (1 - ty)
                + g01 * (1 - tx) * ty + g11 * tx * ty)

    def height_at(self, x, y):
        """Interpolated surface height at (x, y); raises OutOfBounds."""
        inside = self.contains(x, y)
        if not np.all(inside):
            raise OutOfBounds(f"query outside heightfield bounds {self.bounds}")
        return self._interp(self.heights, x, y)

    def albedo_at(self, x, y):
        return self._interp(self.albedo, x, y)

    def normal_at(self, x, y):
        """Upward surface normal from central differences of the height grid."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        xmin, ymin, xmax, ymax = self.bounds
        d = self.cell
        xl = np.clip(x - d, xmin, xmax)
        xr = np.clip(x + d, xmin, xmax)
        yl = np.clip(y - d, ymin, ymax)
        yr = np.clip(y + d, ymin, ymax)
        dhx = (self._interp(self.heights, xr, y) - self._interp(self.heights, xl, y)) / (xr - xl)
        dhy = (self._interp(self.heights, x, yr) - self._interp(self.heights, x, yl)) / (yr - yl)
        n = np.stack([-dhx, -dhy, np.ones_like(dhx)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(b"UAVH")
            f.write(struct.pack("<IIddd", self.nx, self.ny,
                                self.origin[0], self.origin[1], self.cell))
            f.write(self.heights.astype("<f4").tobytes(order="C"))
            f.write(self.albedo.astype("<f4").tobytes(order="C"))

    @staticmethod
    def load(path) -> "Heightfield":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != b"UAVH":
                raise DataError(f"{path}: bad heightfield magic {magic!r}")
            nx, ny, x0, y0, cell = struct.unpack("<IIddd", f.read(32))
            n = nx * ny
            heights = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(nx, ny)
            albedo = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(nx, ny)
        return Heightfield((x0, y0), cell, heights.astype(np.float64),
                           albedo.astype(np.float64))


def generate_scene(spec: SceneSpec) -> Heightfield:
    """Procedural terrain: smooth low-frequency relief plus flat-topped
    rectangular buildings, with a noisy grayscale albedo that gives the
    corner detector something to bite on."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = max(2, int(round(spec.extent / spec.cell)) + 1)
    xs = np.arange(n) * spec.cell
    gx, gy = np.meshgrid(xs, xs, indexing="ij")

    # Base relief: a fixed number of seeded cosine waves, rescaled so the
    # peak-to-peak equals the requested amplitude.
    base = np.zeros((n, n))
    n_waves = 6
    freqs = rng.uniform(1.0, 4.0, size=(n_waves, 2)) / spec.extent
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_waves)
    weights = rng.uniform(0.5, 1.0, size=n_waves)
    for k in range(n_waves):
        base += weights[k] * np.cos(2.0 * np.pi * (freqs[k, 0] * gx + freqs[k, 1] * gy)
                                    + phases[k])
    span = float(base.max() - base.min())
    if span > 0 and spec.amplitude > 0:
        base = (base - base.min()) / span * spec.amplitude
    else:
        base = np.zeros((n, n))

    # Smooth multi-scale noise albedo. Every octave of structure is a
    # location-unique random field with no straight edges or repeated
    # geometry, so binary patch descriptors stay distinctive across the
    # severalfold viewing-scale range between queries and the reference
    # grid (uniform regions or tiled patterns alias badly there).
    def smooth_octave(nodes_per_cell: int, amp: float) -> np.ndarray:
        nc = max(2, n // nodes_per_cell)
        pat = rng.random((nc, nc))
        coords = np.linspace(0.0, nc - 1.0, n)
        cx_, cy_ = np.meshgrid(coords, coords, indexing="ij")
        i0 = np.clip(cx_.astype(np.int64), 0, nc - 2)
        j0 = np.clip(cy_.astype(np.int64), 0, nc - 2)
        tx = cx_ - i0
        ty = cy_ - j0
        v = (pat[i0, j0] * (1 - tx) + pat[i0 + 1, j0] * tx) * (1 - ty) \
            + (pat[i0, j0 + 1] * (1 - tx) + pat[i0 + 1, j0 + 1] * tx) * ty
        return amp * (v - 0.5)

    albedo = np.full((n, n), 0.5)
    albedo += smooth_octave(8, 0.45)
    albedo += smooth_octave(3, 0.40)

    heights = base.copy()
    fp_lo, fp_hi = spec.footprint_range
    h_lo, h_hi = spec.height_range
    for _ in range(spec.building_count):
        cx = rng.uniform(0.1 * spec.extent, 0.9 * spec.extent)
        cy = rng.uniform(0.1 * spec.extent, 0.9 * spec.extent)
        wx = rng.uniform(fp_lo, fp_hi)
        wy = rng.uniform(fp_lo, fp_hi)
        bh = rng.uniform(h_lo, h_hi)
        shade = rng.uniform(-0.25, 0.25)
        i0 = max(0, int(np.ceil((cx - wx / 2) / spec.cell)))
        i1 = min(n - 1, int(np.floor((cx + wx / 2) / spec.cell)))
        j0 = max(0, int(np.ceil((cy - wy / 2) / spec.cell)))
        j1 = min(n - 1, int(np.floor((cy + wy / 2) / spec.cell)))
        if i1 <= i0 or j1 <= j0:
            continue
        top = base[(i0 + i1) // 2, (j0 + j1) // 2] + bh
        region = heights[i0:i1 + 1, j0:j1 + 1]
        heights[i0:i1 + 1, j0:j1 + 1] = np.maximum(region, top)
        # Roofs keep the noise texture, offset so buildings read distinctly.
        albedo[i0:i1 + 1, j0:j1 + 1] += shade

    albedo += 0.35 * (rng.random((n, n)) - 0.5)
    np.clip(albedo, 0.05, 0.95, out=albedo)
    return Heightfield((0.0, 0.0), spec.cell, heights, albedo)


def raycast(hf: Heightfield, origin, direction):
    """First intersection of a ray with the interpolated surface.

    Returns the hit point as a 3-vector, or None when the ray leaves the
    grid or points skyward above all terrain. `direction` must be unit norm
    within 1e-6.
    """
    o = np.asarray(origin, dtype=np.float64).reshape(1, 3)
    d = np.asarray(direction, dtype=np.float64).reshape(1, 3)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("ray direction must be unit norm")
    hits, dists, ok = raycast_batch(hf, o, d)
    return hits[0] if ok[0] else None


def _ray_interval(hf: Heightfield, o: np.ndarray, d: np.ndarray):
    """Per-ray [t0, t1] over which a surface crossing is possible."""
    xmin, ymin, xmax, ymax = hf.bounds
    zmax = float(hf.heights.max())
    zmin = float(hf.heights.min())
    n = o.shape[0]
    t0 = np.zeros(n)
    t1 = np.full(n, np.inf)
    for axis, (lo, hi) in enumerate(((xmin, xmax), (ymin, ymax))):
        da = d[:, axis]
        oa = o[:, axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo - oa) / da
            tb = (hi - oa) / da
        near = np.minimum(ta, tb)
        far = np.maximum(ta, tb)
        parallel = np.abs(da) < 1e-15
        inside = (oa >= lo) & (oa <= hi)
        near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
        far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
        t0 = np.maximum(t0, near)
        t1 = np.minimum(t1, far)
    dz = d[:, 2]
    oz = o[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        # Climbing rays cannot cross once above the highest node; descending
        # rays cannot cross after dropping below the lowest one.
        t_zhi = np.where(dz > 1e-15, (zmax - oz) / dz, np.inf)
        t_zlo = np.where(dz < -1e-15, (zmin - oz) / dz, np.inf)
    t1 = np.minimum(t1, np.where(dz > 1e-15, t_zhi, t_zlo))
    up_miss = (dz >= 0) & (oz > zmax)
    t1 = np.where(up_miss, -1.0, t1)
    return t0, t1


@numba.njit(cache=True)
def _march_kernel(flat, ny, xspan, yspan, ax, ay, oz, bx, by, dz,
                  t0, t1, step, n_bisect):
    """Per-ray march + bisection against a flattened height grid.

    The ray's footprint in grid units is gx(t) = ax + t*bx, gy(t) = ay + t*by;
    heights are bilinear between nodes. Rays whose first sample is already at
    or below the surface count as misses.
    """
    n = ax.shape[0]
    t_out = np.full(n, np.nan)
    hit = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        t = t0[i]
        limit = t1[i]
        if limit <= t:
            continue
        axi, ayi, ozi = ax[i], ay[i], oz[i]
        bxi, byi, dzi = bx[i], by[i], dz[i]

        gx = min(max(axi + t * bxi, 0.0), xspan)
        gy = min(max(ayi + t * byi, 0.0), yspan)
        i0 = int(gx)
        j0 = int(gy)
        base = i0 * ny + j0
        h0 = flat[base] + (flat[base + ny] - flat[base]) * (gx - i0)
        h1 = flat[base + 1] + (flat[base + ny + 1] - flat[base + 1]) * (gx - i0)
        if ozi + t * dzi - (h0 + (h1 - h0) * (gy - j0)) <= 0.0:
            continue

        lo = t
        hi = t
        found = False
        while t < limit:
            t_next = t + step
            if t_next > limit:
                t_next = limit
            gx = min(max(axi + t_next * bxi, 0.0), xspan)
            gy = min(max(ayi + t_next * byi, 0.0), yspan)
            i0 = int(gx)
            j0 = int(gy)
            base = i0 * ny + j0
            h0 = flat[base] + (flat[base + ny] - flat[base]) * (gx - i0)
            h1 = flat[base + 1] + (flat[base + ny + 1] - flat[base + 1]) * (gx - i0)
            if ozi + t_next * dzi - (h0 + (h1 - h0) * (gy - j0)) <= 0.0:
                lo = t
                hi = t_next
                found = True
                break
            t = t_next
        if not found:
            continue

        for _ in range(n_bisect):
            mid = 0.5 * (lo + hi)
            gx = min(max(axi + mid * bxi, 0.0), xspan)
            gy = min(max(ayi + mid * byi, 0.0), yspan)
            i0 = int(gx)
            j0 = int(gy)
            base = i0 * ny + j0
            h0 = flat[base] + (flat[base + ny] - flat[base]) * (gx - i0)
            h1 = flat[base + 1] + (flat[base + ny + 1] - flat[base + 1]) * (gx - i0)
            if ozi + mid * dzi - (h0 + (h1 - h0) * (gy - j0)) <= 0.0:
                hi = mid
            else:
                lo = mid
        t_out[i] = 0.5 * (lo + hi)
        hit[i] = True
    return t_out, hit


def raycast_batch(hf: Heightfield, origins, dirs):
    """Vectorized raycast.

    Returns (hits (n, 3), ray_params (n,), hit_mask (n,)). Non-hits have
    undefined hit rows. Origins below the surface at entry are misses.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = o.shape[0]
    step = hf.cell / 2.0
    t0, t1 = _ray_interval(hf, o, d)

    # Descending rays cross nothing while still above the highest node;
    # skip that span (minus one step of slack) before marching.
    zmax = float(hf.heights.max())
    dz = d[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_skip = np.where(dz < -1e-15, (zmax - o[:, 2]) / dz - step, t0)
    t0 = np.maximum(t0, np.maximum(t_skip, 0.0))
    t1 = np.where(np.isfinite(t1), t1, -1.0)  # unreachable; defensive

    x0c, y0c = hf.origin
    inv_cell = 1.0 / hf.cell
    flat = np.ascontiguousarray(hf.heights.reshape(-1))
    params, hit = _march_kernel(
        flat, hf.ny, (hf.nx - 1) - 1e-12, (hf.ny - 1) - 1e-12,
        (o[:, 0] - x0c) * inv_cell, (o[:, 1] - y0c) * inv_cell, o[:, 2],
        d[:, 0] * inv_cell, d[:, 1] * inv_cell, dz,
        t0, t1, step, _BISECT_ITERS)

    hits = np.full((n, 3), np.nan)
    if np.any(hit):
        hits[hit] = o[hit] + params[hit, None] * d[hit]
    return hits, params, hit


@dataclass(frozen=True)
class RenderedView:
    """Shaded grayscale raster plus metric depth for one camera."""

    rgb: np.ndarray
    depth: np.ndarray
    pose: Pose
    intrinsics: Intrinsics

    def __post_init__(self):
        if self.rgb.shape != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError("raster dimensions must match intrinsics")
        if self.depth.shape != self.rgb.shape:
            raise ValueError("depth dimensions must match raster")
        d = self.depth
        if np.any((d != 0.0) & (d < NEAR_PLANE)):
            raise ValueError("depth values must be 0 or >= near-plane epsilon")


def render_view(hf: Heightfield, pose: Pose, K: Intrinsics, sun_dir=(0.35, 0.2, 0.9)) -> RenderedView:
    """Cast one ray per pixel center; Lambertian-shade hits, depth = camera z.

    Pure function of its inputs: identical arguments give bit-identical
    rasters. Sky (non-hit) pixels are 0 in both channels.
    """
    sun = np.asarray(sun_dir, dtype=np.float64)
    sun = sun / np.linalg.norm(sun)
    w, h = K.width, K.height
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    d_cam = np.stack([(us - K.cx) / K.fx, (vs - K.cy) / K.fy, np.ones_like(us)], axis=-1)
    d_cam = d_cam.reshape(-1, 3)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    d_world = d_cam @ pose.rotation  # R^T applied to each row
    center = pose.center()
    origins = np.broadcast_to(center, d_world.shape)

    hits, t_ray, ok = raycast_batch(hf, origins, d_world)
    depth = np.zeros(w * h)
    depth[ok] = t_ray[ok] * d_cam[ok, 2]
    ok &= depth >= NEAR_PLANE
    depth[~ok] = 0.0

    shade = np.zeros(w * h)
    if np.any(ok):
        hx = hits[ok, 0]
        hy = hits[ok, 1]
        normals = hf.normal_at(hx, hy)
        lam = np.maximum(normals @ sun, 0.0)
        shade[ok] = hf.albedo_at(hx, hy) * lam
    rgb = np.clip(np.rint(shade * 255.0), 0, 255).astype(np.uint8).reshape(h, w)
    return RenderedView(rgb=rgb, depth=depth.reshape(h, w).astype(np.float64),
                        pose=pose, intrinsics=K)


def sample_depth_bilinear(depth: np.ndarray, x, y):
    """Bilinear depth lookup that ignores invalid (0) neighbors.

    Weights of invalid neighbors are dropped and the rest renormalized;
    returns (values, ok) where ok is False when all four neighbors are
    invalid or the point falls outside the raster.
    """
    h, w = depth.shape
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    i0 = np.clip(np.floor(xc).astype(np.int64), 0, w - 2)
    j0 = np.clip(np.floor(yc).astype(np.int64), 0, h - 2)
    tx = xc - i0
    ty = yc - j0
    vals = np.zeros(x.shape)
    wsum = np.zeros(x.shape)
    for di, dj, wgt in ((0, 0, (1 - tx) * (1 - ty)), (1, 0, tx * (1 - ty)),
                        (0, 1, (1 - tx) * ty), (1, 1, tx * ty)):
        d = depth[j0 + dj, i0 + di]
        valid = d > 0
        vals += np.where(valid, d * wgt, 0.0)
        wsum += np.where(valid, wgt, 0.0)
    ok = inside & (wsum > 1e-12)
    out = np.where(ok, vals / np.where(wsum > 1e-12, wsum, 1.0), 0.0)
    return out, ok


def save_pgm(path, image: np.ndarray):
    """Write an 8-bit grayscale (P5) or RGB (P6) binary netpbm raster."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise ValueError("netpbm writer expects uint8 rasters")
    if img.ndim == 2:
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n"
    else:
        raise ValueError("expected HxW or HxWx3 raster")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(img.tobytes(order="C"))


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data[:2] in (b"P5", b"P6"):
        raise DataError(f"{path}: not a binary PGM/PPM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit rasters supported")
    channels = 1 if data[:2] == b"P5" else 3
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h * channels, offset=pos)
    return raster.reshape((h, w) if channels == 1 else (h, w, 3)).copy()


def save_depth(path, depth: np.ndarray):
    d = np.asarray(depth, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(b"UAVD")
        f.write(struct.pack("<II", d.shape[1], d.shape[0]))
        f.write(d.astype("<f4").tobytes(order="C"))


def load_depth(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != b"UAVD":
            raise DataError(f"{path}: bad depth magic {magic!r}")
        w, h = struct.unpack("<II", f.read(8))
        d = np.frombuffer(f.read(4 * w * h), dtype="<f4").reshape(h, w)
    return d.astype(np.float64)
