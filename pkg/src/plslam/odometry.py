"""Frame-to-frame motion estimation and entropy-based keyframe selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import (
    D_MIN, Z_MIN, StereoCamera, backproject_many, point_pose_jacobian, project_camera,
    projection_jacobian,
)
from .errors import (
    IllConditioned, InsufficientMatches, NonPositiveDepth, SingularCovariance, SolverDiverged,
)
from .features import Frame, MatchSet
from .lie import MotionEstimate, Pose, se3_exp, se3_left_jacobian_inv, se3_log

log = logging.getLogger(__name__)

MAD_SCALE = 1.4826
ENTROPY_CONST = 3.0 * (1.0 + np.log(2.0 * np.pi))


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 50
    step_tolerance: float = 1e-8
    huber_delta: float = 1.0
    k_out: float = 2.0
    lm_lambda_init: float = 1e-4
    lm_lambda_up: float = 10.0
    lm_lambda_down: float = 0.1
    min_correspondences: int = 10
    # bounds (pixels) on the scaled-MAD outlier cutoff
    outlier_floor: float = 1.0
    outlier_cap: float = 5.0
    max_condition: float = 1e12

    def __post_init__(self):
        for name in ("max_iterations", "step_tolerance", "huber_delta", "k_out", "lm_lambda_init",
                     "lm_lambda_up", "lm_lambda_down", "min_correspondences"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(eq=False)
class FramePair:
    """Correspondences between frame t (3D, camera-t coordinates) and frame t+1 (2D).

    Lines are given as 3D endpoints in frame t and normalised infinite-line
    coefficients observed in frame t+1.
    """

    points_3d: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    points_obs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    lines_P: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    lines_Q: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    lines_obs: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.points_3d = np.asarray(self.points_3d, dtype=float).reshape(-1, 3)
        self.points_obs = np.asarray(self.points_obs, dtype=float).reshape(-1, 2)
        self.lines_P = np.asarray(self.lines_P, dtype=float).reshape(-1, 3)
        self.lines_Q = np.asarray(self.lines_Q, dtype=float).reshape(-1, 3)
        self.lines_obs = np.asarray(self.lines_obs, dtype=float).reshape(-1, 3)

    @property
    def n_points(self) -> int:
        return len(self.points_3d)

    @property
    def n_lines(self) -> int:
        return len(self.lines_P)

    def __len__(self) -> int:
        return self.n_points + self.n_lines

    def subset(self, point_mask: np.ndarray, line_mask: np.ndarray) -> "FramePair":
        return FramePair(self.points_3d[point_mask], self.points_obs[point_mask],
                         self.lines_P[line_mask], self.lines_Q[line_mask], self.lines_obs[line_mask])


# -- residuals -------------------------------------------------------------


def point_residuals(cam: StereoCamera, pose: Pose, X: np.ndarray, obs: np.ndarray, shift: float = 0.0):
    """Vectorised point reprojection residuals ``obs - pi(pose, X)``.

    ``shift`` moves the projection centre along the camera x axis (the
    baseline for the right image). Returns ``(e, J_pose, J_point, valid)``
    with shapes (N,2), (N,2,6), (N,2,3), (N,).
    """
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    Xc = pose.apply(X)
    valid = Xc[:, 2] > Z_MIN
    Xs = Xc.copy()
    Xs[~valid, 2] = 1.0
    Xo = Xs - np.array([shift, 0.0, 0.0])
    Jproj = projection_jacobian(cam, Xo)
    e = np.asarray(obs, dtype=float).reshape(-1, 2) - project_camera(cam, Xo)
    J_pose = -Jproj @ point_pose_jacobian(Xs)
    J_point = -Jproj @ pose.R
    return e, J_pose, J_point, valid


def line_residuals(cam: StereoCamera, pose: Pose, P: np.ndarray, Q: np.ndarray, l: np.ndarray,
                   shift: float = 0.0):
    """Vectorised signed endpoint-to-line distances.

    Returns ``(e, J_pose, J_P, J_Q, valid)``; row 0 of each residual depends on
    P only and row 1 on Q only. ``shift`` as in :func:`point_residuals`.
    """
    P = np.asarray(P, dtype=float).reshape(-1, 3)
    Q = np.asarray(Q, dtype=float).reshape(-1, 3)
    l = np.asarray(l, dtype=float).reshape(-1, 3)
    n = len(P)
    e = np.zeros((n, 2))
    J_pose = np.zeros((n, 2, 6))
    J_ends = np.zeros((2, n, 3))
    valid = np.ones(n, dtype=bool)
    for row, X in enumerate((P, Q)):
        Xc = pose.apply(X)
        ok = Xc[:, 2] > Z_MIN
        Xc[~ok, 2] = 1.0
        valid &= ok
        Xo = Xc - np.array([shift, 0.0, 0.0])
        uv = project_camera(cam, Xo)
        e[:, row] = l[:, 0] * uv[:, 0] + l[:, 1] * uv[:, 1] + l[:, 2]
        dl = np.einsum("ni,nij->nj", l[:, :2], projection_jacobian(cam, Xo))
        J_pose[:, row, :] = np.einsum("nj,njk->nk", dl, point_pose_jacobian(Xc))
        J_ends[row] = dl @ pose.R
    J_P = np.zeros((n, 2, 3))
    J_Q = np.zeros((n, 2, 3))
    J_P[:, 0, :] = J_ends[0]
    J_Q[:, 1, :] = J_ends[1]
    return e, J_pose, J_P, J_Q, valid


def point_residual(cam: StereoCamera, pose: Pose, Xw, obs):
    """Single point residual with Jacobians w.r.t. the pose (2x6) and the point (2x3)."""
    e, Jp, Jx, valid = point_residuals(cam, pose, Xw, obs)
    if not valid[0]:
        raise NonPositiveDepth("point is behind the camera")
    return e[0], Jp[0], Jx[0]


def line_residual(cam: StereoCamera, pose: Pose, P, Q, line):
    """Single line residual with Jacobians w.r.t. the pose and both endpoints."""
    e, Jp, JP, JQ, valid = line_residuals(cam, pose, P, Q, line)
    if not valid[0]:
        raise NonPositiveDepth("segment endpoint is behind the camera")
    return e[0], Jp[0], JP[0], JQ[0]


# -- robust loss -------------------------------------------------------------


def pseudo_huber(sq: np.ndarray, delta: float) -> np.ndarray:
    """Pseudo-Huber cost of squared residual norms."""
    return 2.0 * delta * delta * (np.sqrt(1.0 + sq / (delta * delta)) - 1.0)


def pseudo_huber_weight(sq: np.ndarray, delta: float) -> np.ndarray:
    """IRLS weight d(cost)/d(sq) for :func:`pseudo_huber`."""
    return 1.0 / np.sqrt(1.0 + sq / (delta * delta))


# -- solver -----------------------------------------------------------------


@dataclass
class MotionSolution:
    pose: Pose
    covariance_delta: np.ndarray
    point_inliers: np.ndarray
    line_inliers: np.ndarray
    robust_costs: list[float]
    first_step_norm: float
    iterations: int

    @property
    def inlier_ratio(self) -> float:
        n = len(self.point_inliers) + len(self.line_inliers)
        if n == 0:
            return 0.0
        return float(self.point_inliers.sum() + self.line_inliers.sum()) / n

    def estimate(self) -> MotionEstimate:
        xi = se3_log(self.pose)
        Jinv = se3_left_jacobian_inv(xi)
        return MotionEstimate(xi, Jinv @ self.covariance_delta @ Jinv.T, self.inlier_ratio)


def _linearize(cam: StereoCamera, pair: FramePair, pose: Pose):
    ep, Jp, _, vp = point_residuals(cam, pose, pair.points_3d, pair.points_obs)
    el, Jl, _, _, vl = line_residuals(cam, pose, pair.lines_P, pair.lines_Q, pair.lines_obs)
    e = np.concatenate([ep, el])
    J = np.concatenate([Jp, Jl])
    valid = np.concatenate([vp, vl])
    return e, J, valid


def _cost(e: np.ndarray, valid: np.ndarray, robust: bool, delta: float) -> float:
    sq = np.einsum("ni,ni->n", e, e)[valid]
    return float(pseudo_huber(sq, delta).sum() if robust else sq.sum())


def _gauss_newton(cam: StereoCamera, pair: FramePair, cfg: SolverConfig, pose: Pose, robust: bool):
    delta = cfg.huber_delta
    lam = cfg.lm_lambda_init
    e, J, valid = _linearize(cam, pair, pose)
    cost = _cost(e, valid, robust, delta)
    costs = [cost]
    first_step = None
    rejections = 0
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        sq = np.einsum("ni,ni->n", e, e)
        w = pseudo_huber_weight(sq, delta) if robust else np.ones(len(sq))
        w = np.where(valid, w, 0.0)
        H = np.einsum("n,nia,nib->ab", w, J, J)
        g = np.einsum("n,nia,ni->a", w, J, e)
        A = H + lam * np.diag(np.diag(H))
        try:
            step = -np.linalg.solve(A, g)
        except np.linalg.LinAlgError as exc:
            raise IllConditioned("singular normal equations") from exc
        if not np.all(np.isfinite(step)):
            raise SolverDiverged("non-finite update")
        step_norm = float(np.linalg.norm(step))
        if first_step is None:
            first_step = step_norm
        if step_norm < cfg.step_tolerance:
            break
        cand = se3_exp(step) @ pose
        e_new, J_new, valid_new = _linearize(cam, pair, cand)
        cost_new = _cost(e_new, valid_new, robust, delta)
        if cost_new <= cost:
            pose, e, J, valid = cand, e_new, J_new, valid_new
            converged = cost - cost_new <= 1e-15 * max(cost, 1e-300)
            cost = cost_new
            costs.append(cost)
            lam = max(lam * cfg.lm_lambda_down, 1e-12)
            if converged or cost == 0.0:
                break
        else:
            rejections += 1
            lam *= cfg.lm_lambda_up
            if rejections >= cfg.max_iterations:
                raise SolverDiverged("cost increased on every attempted step")
    sq = np.einsum("ni,ni->n", e, e)
    w = pseudo_huber_weight(sq, delta) if robust else np.ones(len(sq))
    w = np.where(valid, w, 0.0)
    H = np.einsum("n,nia,nib->ab", w, J, J)
    return pose, H, e, valid, costs, (first_step or 0.0), it


def outlier_cutoff(norms: np.ndarray, cfg: SolverConfig) -> float:
    """Scaled-MAD cutoff on residual norms, clamped to [outlier_floor, outlier_cap]."""
    if len(norms) == 0:
        return cfg.outlier_floor
    c = cfg.k_out * MAD_SCALE * float(np.median(norms))
    return float(np.clip(c, cfg.outlier_floor, cfg.outlier_cap))


def solve_motion(pair: FramePair, cam: StereoCamera, cfg: SolverConfig = SolverConfig(),
                 init=None) -> MotionSolution:
    """Two-step robust estimate of the pose mapping frame-t points into frame t+1."""
    if len(pair) < cfg.min_correspondences:
        raise InsufficientMatches(f"{len(pair)} correspondences < {cfg.min_correspondences}")
    if init is None:
        pose0 = Pose.identity()
    elif isinstance(init, Pose):
        pose0 = init
    else:
        pose0 = se3_exp(init)

    pose1, _, e1, valid1, costs, first_step, it1 = _gauss_newton(cam, pair, cfg, pose0, robust=True)
    for a, b in zip(costs, costs[1:]):
        assert b <= a, "robust cost increased across an accepted step"
    norms = np.linalg.norm(e1, axis=1)
    cut = outlier_cutoff(norms[valid1], cfg)
    inl = valid1 & (norms <= cut)
    p_in, l_in = inl[:pair.n_points], inl[pair.n_points:]
    if int(inl.sum()) < cfg.min_correspondences:
        raise InsufficientMatches(f"only {int(inl.sum())} inliers after outlier rejection")

    pose2, H, _, _, _, _, it2 = _gauss_newton(cam, pair.subset(p_in, l_in), cfg, pose1, robust=False)
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > cfg.max_condition:
        raise IllConditioned(f"Hessian condition number {cond:.3g}")
    cov = np.linalg.inv(H)
    cov = 0.5 * (cov + cov.T)
    return MotionSolution(pose2, cov, p_in, l_in, costs, first_step, it1 + it2)


def estimate_motion(pair: FramePair, cam: StereoCamera, cfg: SolverConfig = SolverConfig(),
                    init=None) -> MotionEstimate:
    return solve_motion(pair, cam, cfg, init).estimate()


# -- frame pairs from matched frames ----------------------------------------


def build_frame_pair(cam: StereoCamera, frame_a: Frame, frame_b: Frame, point_matches: MatchSet,
                     line_matches: MatchSet, point_xyz_a: np.ndarray | None = None,
                     line_xyz_a: np.ndarray | None = None) -> tuple[FramePair, list, list]:
    """Back-project frame-a features and pair them with frame-b observations.

    ``point_xyz_a`` / ``line_xyz_a`` optionally override the stereo
    back-projection (rows of NaN fall back to it). Returns the pair plus the
    matches actually used, in pair order.
    """
    pm = [m for m in point_matches if frame_a.point_disp[m.index_a] > D_MIN]
    lm = [m for m in line_matches if np.all(frame_a.line_disp[m.index_a] > D_MIN)]
    ia = np.array([m.index_a for m in pm], dtype=int)
    ib = np.array([m.index_b for m in pm], dtype=int)
    X = backproject_many(cam, frame_a.point_uv[ia], frame_a.point_disp[ia])
    if point_xyz_a is not None and len(ia):
        over = point_xyz_a[ia]
        ok = np.all(np.isfinite(over), axis=1)
        X[ok] = over[ok]
    ja = np.array([m.index_a for m in lm], dtype=int)
    jb = np.array([m.index_b for m in lm], dtype=int)
    pq = frame_a.line_pq[ja]
    P = backproject_many(cam, pq[:, :2], frame_a.line_disp[ja, 0])
    Q = backproject_many(cam, pq[:, 2:], frame_a.line_disp[ja, 1])
    if line_xyz_a is not None and len(ja):
        over = line_xyz_a[ja]
        ok = np.all(np.isfinite(over), axis=1)
        P[ok] = over[ok, :3]
        Q[ok] = over[ok, 3:]
    pair = FramePair(X, frame_b.point_uv[ib], P, Q, frame_b.line_coeffs[jb])
    return pair, pm, lm


# -- keyframe selection -----------------------------------------------------


def entropy(cov: np.ndarray) -> float:
    """Differential entropy of a 6-D Gaussian with covariance ``cov`` (nats)."""
    sign, logdet = np.linalg.slogdet(np.asarray(cov, dtype=float))
    if sign <= 0 or not np.isfinite(logdet):
        raise SingularCovariance("covariance determinant is not positive")
    return ENTROPY_CONST + 0.5 * float(logdet)


def keyframe_decision(h_span: float, h_first: float, threshold: float = 0.9) -> bool:
    """Insert a keyframe when ``h_span / h_first`` falls below ``threshold``.

    With negative entropies (tight covariances) the ratio still shrinks as the
    span uncertainty grows. Mixed signs cannot be compared and force insertion.
    """
    if not np.isfinite(h_first) or h_first == 0.0:
        raise ValueError("h_first must be finite and nonzero")
    if (h_span < 0.0) != (h_first < 0.0):
        log.info("entropy sign change (h_span=%.4g, h_first=%.4g): forcing keyframe", h_span, h_first)
        return True
    return h_span / h_first < threshold
