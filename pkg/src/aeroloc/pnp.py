"""6-DoF pose recovery from 2D-3D correspondences.

The minimal solver is the classical three-point resection: the quartic in
the ratio of the second and third point ranges is solved via the companion
matrix, the roots are Newton-polished, and camera-frame points are aligned
to world points with an SVD absolute-orientation step. A fourth point, when
given, ranks the (up to four) candidates by its reprojection error.

The robust loop is RANSAC over seeded 4-point samples with adaptive
termination. When a rotation prior from the vehicle's inertial sensors is
available, the loop compares the gravity direction of the current best
hypothesis against the prior's: deviation is the arc-cosine of the clamped
dot product of the two camera-frame gravity unit vectors. Once the best
hypothesis both clears a minimum inlier ratio and agrees with the prior's
gravity within a threshold, iterating stops early. Gravity constrains only
two rotational degrees of freedom, hence the extra inlier-ratio gate: a
gravity-consistent pose can still be arbitrarily wrong in translation.

Refinement is Levenberg-Marquardt on pixel reprojection residuals over a
6-parameter local increment (3 rotation, 3 translation), with the analytic
Jacobian exposed for verification against finite differences.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import AeroLocError
from .geom import Intrinsics, Pose, SensorPrior, gravity_direction
from .matching import Correspondence2D3D

logger = logging.getLogger(__name__)


class DegenerateConfiguration(AeroLocError):
    """Minimal sample unusable (collinear world points)."""


class NoRealSolution(AeroLocError):
    """The resection quartic has no usable positive real root."""


class TooFewCorrespondences(AeroLocError):
    """RANSAC needs at least 4 correspondences."""


class NoModelFound(AeroLocError):
    """No sampled hypothesis reached 4 inliers."""


@dataclass(frozen=True)
class RansacConfig:
    max_iters: int = 2048
    reproj_thresh: float = 5.0
    confidence: float = 0.999
    gravity_thresh_deg: float = 2.0
    min_inlier_ratio_for_early_stop: float = 0.5
    seed: int = 0
    reject_by_gravity: bool = False  # ablation: drop gravity-inconsistent hypotheses

    def __post_init__(self):
        if self.reproj_thresh <= 0 or self.gravity_thresh_deg < 0:
            raise ValueError("thresholds must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must be in (0, 1)")


@dataclass(frozen=True)
class PoseEstimate:
    pose: Pose
    inliers: np.ndarray
    iterations_run: int
    early_stopped_by_gravity: bool
    gravity_deviation_deg: float | None


def _as_arrays(corrs: list[Correspondence2D3D]) -> tuple[np.ndarray, np.ndarray]:
    pts = np.array([c.world_point for c in corrs], dtype=np.float64).reshape(-1, 3)
    px = np.array([c.query_pixel for c in corrs], dtype=np.float64).reshape(-1, 2)
    return pts, px


def _collinear(p: np.ndarray) -> bool:
    a = p[1] - p[0]
    b = p[2] - p[0]
    cross = np.cross(a, b)
    return np.linalg.norm(cross) <= 1e-9 * max(np.linalg.norm(a) * np.linalg.norm(b), 1e-30)


def _bearings(K: Intrinsics, px: np.ndarray) -> np.ndarray:
    f = np.stack([(px[:, 0] - K.cx) / K.fx, (px[:, 1] - K.cy) / K.fy,
                  np.ones(px.shape[0])], axis=1)
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def _absolute_orientation(world: np.ndarray, cam: np.ndarray) -> Pose:
    """Least-squares rigid transform with x_cam = R @ X_world + t (SVD)."""
    cw = world.mean(axis=0)
    cc = cam.mean(axis=0)
    H = (world - cw).T @ (cam - cc)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return Pose(R, cc - R @ cw)


def _polish_quartic(coeffs: np.ndarray, x: float, iters: int = 3) -> float:
    deriv = np.polyder(coeffs)
    for _ in range(iters):
        fx = np.polyval(coeffs, x)
        dfx = np.polyval(deriv, x)
        if abs(dfx) < 1e-30:
            break
        x -= fx / dfx
    return x


def p3p_solve(world: np.ndarray, bearings: np.ndarray) -> list[Pose]:
    """Poses fitting 3 world points and their unit bearing vectors exactly.

    Grunert's range formulation: with u = s2/s1 and v = s3/s1 the three
    law-of-cosines constraints reduce to a quartic in v. Up to four poses.
    """
    P1, P2, P3 = world
    a = np.linalg.norm(P2 - P3)
    b = np.linalg.norm(P1 - P3)
    c = np.linalg.norm(P1 - P2)
    if min(a, b, c) < 1e-12:
        raise DegenerateConfiguration("coincident world points")
    f1, f2, f3 = bearings
    cos_a = float(np.dot(f2, f3))
    cos_b = float(np.dot(f1, f3))
    cos_g = float(np.dot(f1, f2))

    a2b = (a * a) / (b * b)
    c2b = (c * c) / (b * b)
    ac_b = (a * a - c * c) / (b * b)

    A4 = (ac_b - 1.0) ** 2 - 4.0 * c2b * cos_a * cos_a
    A3 = 4.0 * (ac_b * (1.0 - ac_b) * cos_b
                - (1.0 - (a2b + c2b)) * cos_a * cos_g
                + 2.0 * c2b * cos_a * cos_a * cos_b)
    A2 = 2.0 * (ac_b * ac_b - 1.0
                + 2.0 * ac_b * ac_b * cos_b * cos_b
                + 2.0 * (1.0 - c2b) * cos_a * cos_a
                - 4.0 * (a2b + c2b) * cos_a * cos_b * cos_g
                + 2.0 * (1.0 - a2b) * cos_g * cos_g)
    A1 = 4.0 * (-ac_b * (1.0 + ac_b) * cos_b
                + 2.0 * a2b * cos_g * cos_g * cos_b
                - (1.0 - (a2b + c2b)) * cos_a * cos_g)
    A0 = (1.0 + ac_b) ** 2 - 4.0 * a2b * cos_g * cos_g

    coeffs = np.array([A4, A3, A2, A1, A0])
    scale = np.max(np.abs(coeffs))
    if scale < 1e-30:
        raise NoRealSolution("degenerate quartic")
    roots = np.roots(coeffs / scale)

    poses = []
    for root in roots:
        if abs(root.imag) > 1e-6 * max(1.0, abs(root.real)):
            continue
        v = _polish_quartic(coeffs / scale, float(root.real))
        if v <= 0:
            continue
        denom = 1.0 + v * v - 2.0 * v * cos_b
        if denom <= 1e-15:
            continue
        s1 = b / math.sqrt(denom)
        # Candidate u values: the linear elimination identity, plus the two
        # roots of the remaining law-of-cosines constraint
        # u^2 - 2u*cos_g + 1 - c^2/s1^2 = 0. Near double roots of the
        # quartic the linear identity divides by ~0 and loses accuracy, so
        # all candidates are screened by the constraint that involves `a`.
        u_list = []
        u_den = 2.0 * (cos_g - v * cos_a)
        if abs(u_den) > 1e-12:
            u_list.append(((-1.0 + ac_b) * v * v - 2.0 * ac_b * cos_b * v
                           + 1.0 + ac_b) / u_den)
        disc = cos_g * cos_g - 1.0 + (c * c) / (s1 * s1)
        if disc >= 0:
            u_list.append(cos_g + math.sqrt(disc))
            u_list.append(cos_g - math.sqrt(disc))
        for u in u_list:
            if u <= 0:
                continue
            s2 = u * s1
            s3 = v * s1
            resid = s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * cos_a - a * a
            if abs(resid) > 1e-3 * max(a * a, 1.0):
                continue
            cam_pts = np.stack([s1 * f1, s2 * f2, s3 * f3])
            try:
                pose = _absolute_orientation(world, cam_pts)
            except ValueError:
                continue
            poses.append(pose)

    if not poses:
        raise NoRealSolution("no positive real root produced a pose")
    return poses


def _reproj_errors(pose: Pose, K: Intrinsics, pts: np.ndarray,
                   px: np.ndarray) -> np.ndarray:
    xc = pose.transform(pts)
    z = xc[:, 2]
    err = np.full(pts.shape[0], np.inf)
    front = z > 1e-9
    if np.any(front):
        u = K.fx * xc[front, 0] / z[front] + K.cx
        v = K.fy * xc[front, 1] / z[front] + K.cy
        err[front] = np.hypot(u - px[front, 0], v - px[front, 1])
    return err


def _polish_on_points(pose: Pose, corrs: list[Correspondence2D3D],
                      K: Intrinsics, iters: int = 3) -> Pose:
    """Few Gauss-Newton steps on an exact minimal fit; separates poses born
    from near-double quartic roots down to machine-precision reprojection."""
    current = pose
    for _ in range(iters):
        try:
            r = reprojection_residuals(current, corrs, K)
        except ValueError:
            return current
        if float(np.max(np.abs(r))) < 1e-12:
            return current
        J = reprojection_jacobian(current, corrs, K)
        delta, *_ = np.linalg.lstsq(J, -r, rcond=None)
        if not np.all(np.isfinite(delta)) or np.linalg.norm(delta) > 1.0:
            return current
        current = apply_local_increment(current, delta)
    return current


def pnp_minimal(corrs: list[Correspondence2D3D], K: Intrinsics) -> list[Pose]:
    """Minimal resection from 3 (or 3+1 disambiguating) correspondences.

    With a fourth correspondence the candidates come back sorted by its
    reprojection error, best first.
    """
    if len(corrs) not in (3, 4):
        raise ValueError("pnp_minimal takes exactly 3 or 4 correspondences")
    pts, px = _as_arrays(corrs)
    if _collinear(pts[:3]):
        raise DegenerateConfiguration("collinear world points")
    raw = p3p_solve(pts[:3], _bearings(K, px[:3]))
    polished = [_polish_on_points(p, corrs[:3], K) for p in raw]

    # A minimal solution must interpolate its three points; drop candidates
    # that failed to converge, and collapse duplicates from repeated roots
    # or the redundant u-elimination paths.
    poses: list[Pose] = []
    for p in polished:
        if float(np.max(_reproj_errors(p, K, pts[:3], px[:3]))) > 1e-6:
            continue
        dup = any(np.max(np.abs(p.rotation - q.rotation)) < 1e-6
                  and np.max(np.abs(p.translation - q.translation)) < 1e-6
                  for q in poses)
        if not dup:
            poses.append(p)
    if not poses:
        raise NoRealSolution("no candidate interpolates the minimal points")
    if len(corrs) == 4:
        errs = [float(_reproj_errors(p, K, pts[3:4], px[3:4])[0]) for p in poses]
        order = np.argsort(errs, kind="stable")
        poses = [poses[i] for i in order]
    return poses[:4]


def gravity_deviation(a, b) -> float:
    """Angle in degrees between the camera-frame gravity directions of two
    rotations (Pose, SensorPrior, or bare 3x3 accepted). The dot product is
    clamped to [-1, 1] so exactly equal rotations give exactly 0."""
    def grav(x):
        if isinstance(x, Pose):
            return gravity_direction(x.rotation)
        if isinstance(x, SensorPrior):
            return x.gravity()
        return gravity_direction(np.asarray(x))
    d = float(np.dot(grav(a), grav(b)))
    return math.degrees(math.acos(max(-1.0, min(1.0, d))))


def apply_local_increment(pose: Pose, delta: np.ndarray) -> Pose:
    """Perturb a pose by (omega, dt): x' = exp([omega]x) @ (R X + t) + dt."""
    delta = np.asarray(delta, dtype=np.float64).reshape(6)
    omega = delta[:3]
    dt = delta[3:]
    theta = np.linalg.norm(omega)
    if theta < 1e-12:
        E = np.eye(3)
    else:
        k = omega / theta
        Kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
        E = np.eye(3) + math.sin(theta) * Kx + (1.0 - math.cos(theta)) * (Kx @ Kx)
    R = E @ pose.rotation
    # Re-orthonormalize to keep Pose validation happy over long chains.
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, 2] = -U[:, 2]
        R = U @ Vt
    return Pose(R, E @ pose.translation + dt)


def reprojection_residuals(pose: Pose, corrs: list[Correspondence2D3D],
                           K: Intrinsics) -> np.ndarray:
    """Stacked (2n,) pixel residuals (projection minus observation)."""
    pts, px = _as_arrays(corrs)
    xc = pose.transform(pts)
    z = xc[:, 2]
    if np.any(z <= 1e-9):
        raise ValueError("point behind camera during refinement")
    u = K.fx * xc[:, 0] / z + K.cx
    v = K.fy * xc[:, 1] / z + K.cy
    return np.stack([u - px[:, 0], v - px[:, 1]], axis=1).reshape(-1)


def reprojection_jacobian(pose: Pose, corrs: list[Correspondence2D3D],
                          K: Intrinsics) -> np.ndarray:
    """Analytic (2n, 6) Jacobian of the residuals w.r.t. the local increment
    of apply_local_increment, evaluated at zero increment."""
    pts, _ = _as_arrays(corrs)
    xc = pose.transform(pts)
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    n = pts.shape[0]
    J = np.zeros((2 * n, 6))
    # d(pixel)/d(camera point)
    ju = np.stack([K.fx / z, np.zeros(n), -K.fx * x / (z * z)], axis=1)
    jv = np.stack([np.zeros(n), K.fy / z, -K.fy * y / (z * z)], axis=1)
    # d(camera point)/d(omega) = -[xc]x ; d/d(dt) = I
    for i in range(n):
        px_cross = np.array([[0.0, -z[i], y[i]],
                             [z[i], 0.0, -x[i]],
                             [-y[i], x[i], 0.0]])
        J[2 * i, :3] = ju[i] @ (-px_cross)
        J[2 * i, 3:] = ju[i]
        J[2 * i + 1, :3] = jv[i] @ (-px_cross)
        J[2 * i + 1, 3:] = jv[i]
    return J


def refine_pose(pose: Pose, corrs: list[Correspondence2D3D], K: Intrinsics,
                max_iters: int = 100, rel_tol: float = 1e-10) -> Pose:
    """Levenberg-Marquardt polish of a pose on its inlier correspondences.

    Accepts only cost-decreasing steps, so the returned pose never has a
    higher residual RMS than the input. Singular normal equations degrade
    to returning the current pose with a warning rather than raising.
    """
    if len(corrs) < 4:
        raise TooFewCorrespondences("refinement needs at least 4 correspondences")

    def cost_of(p: Pose) -> float:
        try:
            r = reprojection_residuals(p, corrs, K)
        except ValueError:
            return np.inf
        return float(r @ r)

    current = pose
    cost = cost_of(current)
    if not np.isfinite(cost):
        logger.warning("refinement input has points behind the camera; returning input")
        return pose
    lam = 1e-3
    for _ in range(max_iters):
        r = reprojection_residuals(current, corrs, K)
        J = reprojection_jacobian(current, corrs, K)
        JtJ = J.T @ J
        g = J.T @ r
        stepped = False
        for _ in range(12):
            A = JtJ + lam * np.diag(np.maximum(np.diag(JtJ), 1e-12))
            try:
                delta = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                logger.warning("singular normal equations during refinement")
                return current
            if not np.all(np.isfinite(delta)):
                logger.warning("non-finite refinement step; returning current pose")
                return current
            trial = apply_local_increment(current, delta)
            trial_cost = cost_of(trial)
            if trial_cost < cost:
                rel_drop = (cost - trial_cost) / max(cost, 1e-30)
                current = trial
                cost = trial_cost
                lam = max(lam / 3.0, 1e-12)
                stepped = True
                if rel_drop < rel_tol:
                    return current
                break
            lam *= 10.0
            if lam > 1e12:
                return current
        if not stepped:
            return current
        if cost <= 1e-30:
            return current
    return current


def ransac_pnp(corrs: list[Correspondence2D3D], K: Intrinsics,
               prior: SensorPrior | None = None,
               cfg: RansacConfig = RansacConfig()) -> PoseEstimate:
    """Gravity-guided PnP RANSAC followed by refinement on the inliers.

    Deterministic for a fixed config seed. Early termination is adaptive on
    the usual confidence bound; with a prior present the loop additionally
    halts as soon as the best hypothesis clears the minimum inlier ratio
    and its gravity direction deviates from the prior's by less than the
    gravity threshold.
    """
    n = len(corrs)
    if n < 4:
        raise TooFewCorrespondences(f"need >= 4 correspondences, got {n}")
    pts, px = _as_arrays(corrs)
    rng = np.random.default_rng(cfg.seed)

    best_pose: Pose | None = None
    best_inliers: np.ndarray | None = None
    best_count = 0
    best_mean_err = np.inf
    early_stop = False
    iterations = 0

    for it in range(cfg.max_iters):
        iterations = it + 1
        sample = None
        for _ in range(10):
            cand = rng.choice(n, size=4, replace=False)
            if not _collinear(pts[cand[:3]]):
                sample = cand
                break
        if sample is None:
            continue
        try:
            candidates = pnp_minimal([corrs[i] for i in sample], K)
        except (DegenerateConfiguration, NoRealSolution):
            continue
        hyp = candidates[0]
        if cfg.reject_by_gravity and prior is not None \
                and gravity_deviation(prior, hyp) >= cfg.gravity_thresh_deg:
            continue
        errs = _reproj_errors(hyp, K, pts, px)
        inl = errs < cfg.reproj_thresh
        count = int(inl.sum())
        if count >= 4:
            mean_err = float(errs[inl].mean())
            if count > best_count or (count == best_count and mean_err < best_mean_err):
                best_pose = hyp
                best_inliers = inl
                best_count = count
                best_mean_err = mean_err
                if prior is not None and best_count / n >= cfg.min_inlier_ratio_for_early_stop \
                        and gravity_deviation(prior, best_pose) < cfg.gravity_thresh_deg:
                    early_stop = True
                    break
        if best_count > 0:
            w = best_count / n
            if w >= 1.0 - 1e-12:
                break
            n_required = math.log(max(1.0 - cfg.confidence, 1e-300)) \
                / math.log(1.0 - w ** 4)
            if iterations >= n_required:
                break

    if best_pose is None or best_count < 4:
        raise NoModelFound("no hypothesis reached 4 inliers")

    # Refine on the winning sample's inliers, re-collect the inlier set once
    # against the polished pose, and refine again on that final set.
    inlier_corrs = [corrs[i] for i in np.nonzero(best_inliers)[0]]
    refined = refine_pose(best_pose, inlier_corrs, K)
    errs = _reproj_errors(refined, K, pts, px)
    final_inliers = np.nonzero(errs < cfg.reproj_thresh)[0]
    if len(final_inliers) >= 4:
        refined = refine_pose(refined, [corrs[i] for i in final_inliers], K)
    deviation = gravity_deviation(prior, refined) if prior is not None else None
    return PoseEstimate(pose=refined, inliers=final_inliers,
                        iterations_run=iterations,
                        early_stopped_by_gravity=early_stop,
                        gravity_deviation_deg=deviation)
