"""Local feature detection, binary description, matching, and depth lifting.

Detection is a Harris corner response with 3x3 non-maximum suppression and
quadratic subpixel refinement. Each keypoint carries a 256-bit descriptor
built from seeded pixel-pair intensity comparisons on a smoothed 31x31
patch, rotated to the patch's dominant gradient direction so the bits are
viewpoint-rotation tolerant.

Matching is mutual nearest neighbor on Hamming distance with a ratio test
applied on both sides (which keeps the match set symmetric under swapping
the inputs). 2D-2D matches against a rendered reference are lifted to
2D-3D correspondences by sampling the reference depth map and
back-projecting through the reference pose.

Match file format (text, '#' comments), one line per match:

    qx qy rx ry ref_name score
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geom, scene
from .errors import AeroLocError, ParseError
from .geom import Intrinsics, Pose

DESCRIPTOR_BITS = 256
_PATTERN_SEED = 0xB51EF5
_PATCH_RADIUS = 13
# Detection margin. Descriptor samples reaching past the raster are clamped
# to the border by the bilinear lookup, so the margin only needs to keep the
# subpixel fit and orientation window inside the image.
_BORDER = 8


class ImageTooSmall(AeroLocError):
    """Detector needs at least a 32x32 raster."""


class UnknownReference(AeroLocError):
    """A match references an image absent from the provided views."""


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    score: float
    descriptor: np.ndarray  # 32 bytes, packed bits

    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Match:
    query_pixel: tuple[float, float]
    ref_pixel: tuple[float, float]
    ref_name: str
    score: float


@dataclass(frozen=True)
class Correspondence2D3D:
    query_pixel: tuple[float, float]
    world_point: np.ndarray
    ref_name: str


def _pattern() -> np.ndarray:
    """Fixed (256, 2, 2) sampling-pair offsets, baked from a constant seed."""
    rng = np.random.default_rng(_PATTERN_SEED)
    pts = rng.normal(0.0, _PATCH_RADIUS / 2.0, size=(DESCRIPTOR_BITS, 2, 2))
    return np.clip(pts, -_PATCH_RADIUS, _PATCH_RADIUS)


_PAIRS = _pattern()
_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding."""
    k = _gaussian_kernel(sigma)
    r = (len(k) - 1) // 2
    out = np.pad(img, ((0, 0), (r, r)), mode="reflect")
    acc = np.zeros_like(img)
    for i, w in enumerate(k):
        acc += w * out[:, i:i + img.shape[1]]
    out = np.pad(acc, ((r, r), (0, 0)), mode="reflect")
    acc = np.zeros_like(img)
    for i, w in enumerate(k):
        acc += w * out[i:i + img.shape[0], :]
    return acc


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = img.shape
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    i0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2)
    j0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2)
    tx = x - i0
    ty = y - j0
    v00 = img[j0, i0]
    v10 = img[j0, i0 + 1]
    v01 = img[j0 + 1, i0]
    v11 = img[j0 + 1, i0 + 1]
    return (v00 * (1 - tx) + v10 * tx) * (1 - ty) + (v01 * (1 - tx) + v11 * tx) * ty


def _resize(img: np.ndarray, scale: float) -> np.ndarray:
    """Anti-aliased bilinear downsample by `scale` (<= 1)."""
    if scale >= 1.0:
        return img
    smoothed = _blur(img, 0.5 / scale)
    h2 = max(2, int(round(img.shape[0] * scale)))
    w2 = max(2, int(round(img.shape[1] * scale)))
    ys = (np.arange(h2) + 0.5) / scale - 0.5
    xs = (np.arange(w2) + 0.5) / scale - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return _bilinear(smoothed, gx, gy)


# Detection/description octaves. The reference grid renders from a couple
# of fixed altitudes while query viewing distances vary several-fold (a
# steep low query sees ground at a fraction of the slant range an oblique
# reference sees it from), so pooling keypoints described at these relative
# scales keeps Hamming matching within tolerance for gaps up to ~3x.
PYRAMID_SCALES = (1.0, 0.7071067811865476, 0.5, 0.3535533905932738)


def detect_and_describe(rgb: np.ndarray, max_kp: int = 2048,
                        scales: tuple[float, ...] = PYRAMID_SCALES) -> list[Keypoint]:
    """Harris corners with subpixel refinement and oriented binary patches,
    pooled over a small image pyramid.

    Keypoint positions are reported in base-image pixels whatever the level
    they were detected at. Deterministic: same raster in, same keypoint
    list out. Constant images yield an empty list.
    """
    img = np.asarray(rgb)
    if img.ndim == 3:
        img = img.mean(axis=2)
    if img.shape[0] < 32 or img.shape[1] < 32:
        raise ImageTooSmall(f"raster {img.shape} below 32x32 minimum")
    img = img.astype(np.float64) / 255.0

    out: list[Keypoint] = []
    for scale in scales:
        level = _resize(img, scale)
        if level.shape[0] < 32 or level.shape[1] < 32:
            continue
        for kp in _detect_single_scale(level, max_kp):
            if scale == 1.0:
                out.append(kp)
            else:
                out.append(Keypoint(x=kp.x / scale, y=kp.y / scale,
                                    score=kp.score, descriptor=kp.descriptor))
    out.sort(key=lambda k: (-k.score, k.y, k.x))
    return out[:max_kp]


def _detect_single_scale(img: np.ndarray, max_kp: int) -> list[Keypoint]:
    h, w = img.shape

    gy, gx = np.gradient(img)
    sxx = _blur(gx * gx, 1.5)
    syy = _blur(gy * gy, 1.5)
    sxy = _blur(gx * gy, 1.5)
    det = sxx * syy - sxy * sxy
    tr = sxx + syy
    resp = det - 0.05 * tr * tr

    # 3x3 non-maximum suppression. Ties (exactly equal neighbors, common on
    # synthetic patterns) go to the lexicographically first pixel: strict >
    # against earlier neighbors, >= against later ones.
    pad = np.pad(resp, 1, mode="constant", constant_values=-np.inf)
    peaks = resp > 1e-10
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            if dx == 1 and dy == 1:
                continue
            shifted = pad[dy:dy + h, dx:dx + w]
            if (dy, dx) < (1, 1):
                peaks &= resp > shifted
            else:
                peaks &= resp >= shifted
    peaks[:_BORDER, :] = False
    peaks[-_BORDER:, :] = False
    peaks[:, :_BORDER] = False
    peaks[:, -_BORDER:] = False
    ys, xs = np.nonzero(peaks)
    if len(xs) == 0:
        return []
    scores = resp[ys, xs]
    order = np.lexsort((xs, ys, -scores))[:max_kp]
    ys, xs, scores = ys[order], xs[order], scores[order]

    # Quadratic subpixel refinement along each axis.
    def parabolic(minus, center, plus):
        den = minus - 2.0 * center + plus
        off = np.where(np.abs(den) > 1e-12, 0.5 * (minus - plus) / den, 0.0)
        return np.clip(off, -0.5, 0.5)

    dx_off = parabolic(resp[ys, xs - 1], resp[ys, xs], resp[ys, xs + 1])
    dy_off = parabolic(resp[ys - 1, xs], resp[ys, xs], resp[ys + 1, xs])
    kx = xs + dx_off
    ky = ys + dy_off

    smooth = _blur(img, 2.0)
    sgy, sgx = np.gradient(smooth)

    # Dominant orientation: peak of a magnitude-weighted gradient-direction
    # histogram over a 15x15 patch (parabolic peak refinement). A histogram
    # peak stays put under viewpoint warps that flip the mean gradient
    # around on blob-like patches.
    offs = np.arange(-7, 8, dtype=np.float64)
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    wgt = np.exp(-(ox ** 2 + oy ** 2) / (2.0 * 6.0 ** 2)).ravel()
    px = kx[:, None] + ox.ravel()[None, :]
    py = ky[:, None] + oy.ravel()[None, :]
    pgx = _bilinear(sgx, px, py)
    pgy = _bilinear(sgy, px, py)
    mag = np.hypot(pgx, pgy) * wgt[None, :]
    n_bins = 36
    theta = np.arctan2(pgy, pgx)
    bins = np.minimum((theta + np.pi) / (2 * np.pi / n_bins), n_bins - 1e-9).astype(np.int64)
    hist = np.zeros((len(kx), n_bins))
    rows_idx = np.repeat(np.arange(len(kx)), bins.shape[1])
    np.add.at(hist, (rows_idx, bins.ravel()), mag.ravel())
    peak = hist.argmax(axis=1)
    left = hist[np.arange(len(kx)), (peak - 1) % n_bins]
    center = hist[np.arange(len(kx)), peak]
    right = hist[np.arange(len(kx)), (peak + 1) % n_bins]
    den = left - 2 * center + right
    frac = np.where(np.abs(den) > 1e-12, 0.5 * (left - right) / den, 0.0)
    frac = np.clip(frac, -0.5, 0.5)
    angles = (peak + frac + 0.5) * (2 * np.pi / n_bins) - np.pi

    ca = np.cos(angles)
    sa = np.sin(angles)
    pairs = _PAIRS.reshape(-1, 2)  # (512, 2) sample points
    rx = pairs[:, 0][None, :] * ca[:, None] - pairs[:, 1][None, :] * sa[:, None]
    ry = pairs[:, 0][None, :] * sa[:, None] + pairs[:, 1][None, :] * ca[:, None]
    sx = kx[:, None] + rx
    sy = ky[:, None] + ry
    samples = _bilinear(smooth, sx, sy).reshape(-1, DESCRIPTOR_BITS, 2)
    bits = samples[:, :, 0] < samples[:, :, 1]
    packed = np.packbits(bits.astype(np.uint8), axis=1)

    out = []
    for i in range(len(kx)):
        out.append(Keypoint(x=float(kx[i]), y=float(ky[i]), score=float(scores[i]),
                            descriptor=packed[i]))
    return out


def hamming_matrix(da: np.ndarray, db: np.ndarray) -> np.ndarray:
    """(n1, n2) Hamming distances between packed-bit descriptor stacks."""
    x = np.bitwise_xor(da[:, None, :], db[None, :, :])
    return _POPCOUNT[x].sum(axis=2, dtype=np.int64)


def match_features(query_kps: list[Keypoint], ref_kps: list[Keypoint],
                   ratio: float = 0.9, ref_name: str = "",
                   exclusion_px: float = 4.0) -> list[Match]:
    """Mutual nearest neighbor with a two-sided Lowe ratio test.

    A pair is kept when each keypoint is the other's nearest neighbor and
    the best-to-second-best distance ratio passes on both sides. The
    second-best is taken over keypoints farther than exclusion_px from the
    best match: pyramid pooling detects the same corner at several levels,
    and those near-coincident twins must not veto their own feature. With
    no eligible second candidate the ratio test passes vacuously.
    Score is 1 - d/256.
    """
    if not query_kps or not ref_kps:
        return []
    da = np.stack([k.descriptor for k in query_kps])
    db = np.stack([k.descriptor for k in ref_kps])
    if da.shape[1] != db.shape[1]:
        raise ValueError("descriptor lengths differ")
    qpos = np.array([(k.x, k.y) for k in query_kps])
    rpos = np.array([(k.x, k.y) for k in ref_kps])
    D = hamming_matrix(da, db)
    row_min = D.min(axis=1)
    col_min = D.min(axis=0)

    def second_best(dists: np.ndarray, pos: np.ndarray, anchor: np.ndarray):
        far = np.hypot(pos[:, 0] - anchor[0], pos[:, 1] - anchor[1]) > exclusion_px
        return int(dists[far].min()) if np.any(far) else None

    out = []
    rows, cols = np.nonzero((D == row_min[:, None]) & (D == col_min[None, :]))
    for i, j in zip(rows, cols):
        d1 = D[i, j]
        d2 = second_best(D[i, :], rpos, rpos[j])
        if d2 is not None and not (d2 > 0 and d1 / d2 <= ratio):
            continue
        d2 = second_best(D[:, j], qpos, qpos[i])
        if d2 is not None and not (d2 > 0 and d1 / d2 <= ratio):
            continue
        q = query_kps[i]
        r = ref_kps[j]
        out.append(Match(query_pixel=(q.x, q.y), ref_pixel=(r.x, r.y),
                         ref_name=ref_name, score=1.0 - d1 / float(DESCRIPTOR_BITS)))
    return out


@dataclass(frozen=True)
class RefView:
    """What lifting needs from one database image."""

    pose: Pose
    intrinsics: Intrinsics
    depth: np.ndarray


def lift_matches(matches: list[Match], refs: dict[str, RefView],
                 edge_tol: float = 0.15) -> list[Correspondence2D3D]:
    """Back-project match reference pixels through their depth maps.

    Depth is sampled bilinearly over the valid (> 0) neighbors only; matches
    whose entire 4-neighborhood is invalid are dropped, as are matches
    sitting on a depth discontinuity (valid neighbors spread more than
    edge_tol relative) where interpolation would fabricate floating
    geometry. Corners love depth edges, so the guard matters.
    """
    out = []
    for m in matches:
        ref = refs.get(m.ref_name)
        if ref is None:
            raise UnknownReference(f"no reference view named {m.ref_name!r}")
        x, y = m.ref_pixel
        d, ok = scene.sample_depth_bilinear(ref.depth, x, y)
        if not ok[0]:
            continue
        if edge_tol is not None:
            h, w = ref.depth.shape
            i0 = min(max(int(np.floor(x)), 0), w - 2)
            j0 = min(max(int(np.floor(y)), 0), h - 2)
            block = ref.depth[j0:j0 + 2, i0:i0 + 2]
            valid = block[block > 0]
            if valid.size and (valid.max() - valid.min()) > edge_tol * float(d[0]):
                continue
        world = geom.unproject(ref.pose, ref.intrinsics, m.ref_pixel, float(d[0]))
        out.append(Correspondence2D3D(query_pixel=m.query_pixel, world_point=world,
                                      ref_name=m.ref_name))
    return out


def save_matches(path, matches: list[Match]):
    lines = ["# qx qy rx ry ref_name score"]
    for m in matches:
        lines.append(f"{m.query_pixel[0]:.17g} {m.query_pixel[1]:.17g} "
                     f"{m.ref_pixel[0]:.17g} {m.ref_pixel[1]:.17g} "
                     f"{m.ref_name} {m.score:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_external_matches(path, query_size: tuple[int, int] | None = None,
                          ref_sizes: dict[str, tuple[int, int]] | None = None) -> list[Match]:
    """Parse a match file; negative or non-finite pixels are rejected with
    their line number, as are out-of-bounds pixels when sizes are given."""
    path = Path(path)
    out = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ParseError(path, lineno, f"expected 6 fields, got {len(parts)}")
        try:
            qx, qy, rx, ry = (float(v) for v in parts[:4])
            score = float(parts[5])
        except ValueError as e:
            raise ParseError(path, lineno, str(e)) from None
        name = parts[4]
        for label, v in (("qx", qx), ("qy", qy), ("rx", rx), ("ry", ry)):
            if not math.isfinite(v) or v < 0:
                raise ParseError(path, lineno, f"pixel coordinate {label}={v} out of bounds")
        if query_size is not None and (qx > query_size[0] - 1 or qy > query_size[1] - 1):
            raise ParseError(path, lineno, "query pixel outside image")
        if ref_sizes is not None and name in ref_sizes:
            rw, rh = ref_sizes[name]
            if rx > rw - 1 or ry > rh - 1:
                raise ParseError(path, lineno, "reference pixel outside image")
        out.append(Match(query_pixel=(qx, qy), ref_pixel=(rx, ry),
                         ref_name=name, score=score))
    return out
