"""Keyframe refinement, local-map data association and local bundle adjustment."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .camera import D_MIN, Z_MIN, StereoCamera, backproject_many, disparity_of, project_camera
from .errors import IllConditioned, InsufficientMatches, SolverDiverged
from .features import (
    Frame, LineObservation, filter_line_matches, hamming_matrix, line_coeffs_many, line_pair_consistent,
    match_descriptors,
)
from .lie import MotionEstimate, se3_exp
from .odometry import (
    SolverConfig, build_frame_pair, line_residuals, point_residuals, pseudo_huber, pseudo_huber_weight,
    solve_motion,
)
from .world_map import KeyFrame, WorldMap

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BAConfig:
    max_iterations: int = 25
    step_tolerance: float = 1e-8
    relative_cost_tolerance: float = 1e-9
    huber_delta: float = 1.0
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    lambda_max: float = 1e8
    line_damping: float = 1e-6
    max_condition: float = 1e14


@dataclass(frozen=True)
class MatchingConfig:
    ratio: float = 2.0
    max_hamming: int = 80
    angle_tol: float = float(np.deg2rad(10.0))
    length_tol: float = 0.25
    disp_tol: float = 5.0  # pixels; consecutive frames approaching a wall change disparity by >1.5
    window: float = 15.0


# -- problem ------------------------------------------------------------------


@dataclass(eq=False)
class LocalBAProblem:
    """Arrays describing one local bundle adjustment.

    ``poses`` holds every keyframe touched by an observation; ``pose_free``
    marks the optimised ones. Landmarks flagged non-free are held constant.
    """

    cam: StereoCamera
    kf_ids: list
    poses: list
    pose_free: np.ndarray
    point_ids: list
    points: np.ndarray
    point_free: np.ndarray
    line_ids: list
    lines: np.ndarray  # (N, 6): P then Q
    line_free: np.ndarray
    pobs_kf: np.ndarray
    pobs_lm: np.ndarray
    pobs_uv: np.ndarray
    lobs_kf: np.ndarray
    lobs_lm: np.ndarray
    lobs_coeff: np.ndarray
    pobs_ref: list = field(default_factory=list)  # (kf id, obs index) per point observation
    lobs_ref: list = field(default_factory=list)
    # stereo terms: right-image u per point observation, right-image line per line observation
    pobs_ur: Optional[np.ndarray] = None
    lobs_coeff_r: Optional[np.ndarray] = None

    def __post_init__(self):
        self.pose_free = np.asarray(self.pose_free, dtype=bool)
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.point_free = np.asarray(self.point_free, dtype=bool)
        self.lines = np.asarray(self.lines, dtype=float).reshape(-1, 6)
        self.line_free = np.asarray(self.line_free, dtype=bool)
        self.pobs_kf = np.asarray(self.pobs_kf, dtype=int)
        self.pobs_lm = np.asarray(self.pobs_lm, dtype=int)
        self.pobs_uv = np.asarray(self.pobs_uv, dtype=float).reshape(-1, 2)
        self.lobs_kf = np.asarray(self.lobs_kf, dtype=int)
        self.lobs_lm = np.asarray(self.lobs_lm, dtype=int)
        self.lobs_coeff = np.asarray(self.lobs_coeff, dtype=float).reshape(-1, 3)
        if self.pobs_ur is not None:
            self.pobs_ur = np.asarray(self.pobs_ur, dtype=float).reshape(-1)
            self.lobs_coeff_r = np.asarray(self.lobs_coeff_r, dtype=float).reshape(-1, 3)

    @property
    def stereo(self) -> bool:
        return self.pobs_ur is not None

    # variable indexing
    @property
    def pose_var(self) -> np.ndarray:
        idx = np.full(len(self.poses), -1)
        idx[self.pose_free] = np.arange(int(self.pose_free.sum()))
        return idx

    @property
    def point_var(self) -> np.ndarray:
        idx = np.full(len(self.points), -1)
        idx[self.point_free] = np.arange(int(self.point_free.sum()))
        return idx

    @property
    def line_var(self) -> np.ndarray:
        idx = np.full(len(self.lines), -1)
        idx[self.line_free] = np.arange(int(self.line_free.sum()))
        return idx

    @property
    def n_free(self) -> tuple[int, int, int]:
        return int(self.pose_free.sum()), int(self.point_free.sum()), int(self.line_free.sum())

    def copy_state(self):
        return list(self.poses), self.points.copy(), self.lines.copy()

    def set_state(self, state) -> None:
        self.poses, self.points, self.lines = list(state[0]), state[1].copy(), state[2].copy()

    @classmethod
    def from_map(cls, wmap: WorldMap, kf_id: int, local: Optional[tuple[set, set]] = None,
                 anchor_oldest: bool = True, stereo: bool = True) -> "LocalBAProblem":
        """Local keyframes free (oldest anchored), other observers fixed.

        Landmarks seen by a single keyframe carry no multi-view information and
        are left out. ``stereo`` adds right-image residuals built from the
        observed disparities.
        """
        kfs, lms = local if local is not None else wmap.local_map_of(kf_id)
        lms = {l for l in lms if len(wmap.landmark(l).observations) >= 2}
        local_sorted = sorted(kfs)
        observers: set[int] = set()
        for lid in lms:
            observers.update(k for k, _ in wmap.landmark(lid).observations)
        all_kfs = sorted(observers | kfs)
        kf_index = {k: i for i, k in enumerate(all_kfs)}
        free = np.array([k in kfs for k in all_kfs])
        if anchor_oldest and local_sorted:
            free[kf_index[local_sorted[0]]] = False
        point_ids = sorted(l for l in lms if l in wmap.points)
        line_ids = sorted(l for l in lms if l in wmap.lines)
        pidx = {l: i for i, l in enumerate(point_ids)}
        lidx = {l: i for i, l in enumerate(line_ids)}
        pobs = []
        for l in point_ids:
            for k, i in wmap.points[l].observations:
                pobs.append((kf_index[k], pidx[l], k, i))
        lobs = []
        for l in line_ids:
            for k, i in wmap.lines[l].observations:
                lobs.append((kf_index[k], lidx[l], k, i))
        pobs.sort()
        lobs.sort()
        points = np.array([wmap.points[l].position for l in point_ids]).reshape(-1, 3)
        lines = np.array([np.concatenate([wmap.lines[l].P, wmap.lines[l].Q]) for l in line_ids]).reshape(-1, 6)
        pfree = np.ones(len(point_ids), dtype=bool)
        lfree = np.ones(len(line_ids), dtype=bool)
        uv = np.array([wmap.keyframes[k].frame.point_uv[i] for _, _, k, i in pobs]).reshape(-1, 2)
        coeff = np.array([wmap.keyframes[k].frame.line_coeffs[i] for _, _, k, i in lobs]).reshape(-1, 3)
        ur = coeff_r = None
        if stereo:
            ur = uv[:, 0] - np.array([wmap.keyframes[k].frame.point_disp[i] for _, _, k, i in pobs])
            pq = np.array([wmap.keyframes[k].frame.line_pq[i] for _, _, k, i in lobs]).reshape(-1, 4)
            dd = np.array([wmap.keyframes[k].frame.line_disp[i] for _, _, k, i in lobs]).reshape(-1, 2)
            coeff_r = line_coeffs_many(pq[:, :2] - np.c_[dd[:, 0], np.zeros(len(dd))],
                                       pq[:, 2:] - np.c_[dd[:, 1], np.zeros(len(dd))])
        return cls(
            wmap.camera, all_kfs, [wmap.keyframes[k].pose for k in all_kfs], free,
            point_ids, points, pfree, line_ids, lines, lfree,
            [o[0] for o in pobs], [o[1] for o in pobs], uv,
            [o[0] for o in lobs], [o[1] for o in lobs], coeff,
            [(o[2], o[3]) for o in pobs], [(o[2], o[3]) for o in lobs], ur, coeff_r,
        )

    def write_back(self, wmap: WorldMap) -> None:
        for k, pose, free in zip(self.kf_ids, self.poses, self.pose_free):
            if free:
                wmap.keyframes[k].pose = pose
        for l, X, free in zip(self.point_ids, self.points, self.point_free):
            if free:
                wmap.points[l].position = X.copy()
        for l, PQ, free in zip(self.line_ids, self.lines, self.line_free):
            if free:
                wmap.lines[l].P = PQ[:3].copy()
                wmap.lines[l].Q = PQ[3:].copy()


# -- linearisation --------------------------------------------------------------


@dataclass
class Linearization:
    pe: np.ndarray      # (Np_obs, 2)
    pJ_pose: np.ndarray  # (Np_obs, 2, 6)
    pJ_lm: np.ndarray    # (Np_obs, 2, 3)
    le: np.ndarray
    lJ_pose: np.ndarray
    lJ_lm: np.ndarray    # (Nl_obs, 2, 6)
    p_valid: np.ndarray
    l_valid: np.ndarray


def linearize(problem: LocalBAProblem) -> Linearization:
    """Residuals and Jacobians of every observation.

    Left-image rows come first (2 per point, 2 per segment); stereo problems
    append the right-image u residual of points and the two right-image
    endpoint-to-line distances of segments.
    """
    n, m = len(problem.pobs_kf), len(problem.lobs_kf)
    dp, dl = (3, 4) if problem.stereo else (2, 2)
    b = problem.cam.baseline
    pe = np.zeros((n, dp)); pJp = np.zeros((n, dp, 6)); pJx = np.zeros((n, dp, 3)); pv = np.ones(n, bool)
    le = np.zeros((m, dl)); lJp = np.zeros((m, dl, 6)); lJx = np.zeros((m, dl, 6)); lv = np.ones(m, bool)
    for k, pose in enumerate(problem.poses):
        sel = np.flatnonzero(problem.pobs_kf == k)
        if len(sel):
            X = problem.points[problem.pobs_lm[sel]]
            e, Jp, Jx, v = point_residuals(problem.cam, pose, X, problem.pobs_uv[sel])
            pe[sel, :2], pJp[sel, :2], pJx[sel, :2], pv[sel] = e, Jp, Jx, v
            if problem.stereo:
                obs_r = np.c_[problem.pobs_ur[sel], problem.pobs_uv[sel, 1]]
                e, Jp, Jx, _ = point_residuals(problem.cam, pose, X, obs_r, shift=b)
                pe[sel, 2], pJp[sel, 2], pJx[sel, 2] = e[:, 0], Jp[:, 0], Jx[:, 0]
        sel = np.flatnonzero(problem.lobs_kf == k)
        if len(sel):
            PQ = problem.lines[problem.lobs_lm[sel]]
            e, Jp, JP, JQ, v = line_residuals(problem.cam, pose, PQ[:, :3], PQ[:, 3:], problem.lobs_coeff[sel])
            le[sel, :2], lJp[sel, :2], lv[sel] = e, Jp, v
            lJx[sel, :2, :3] = JP
            lJx[sel, :2, 3:] = JQ
            if problem.stereo:
                e, Jp, JP, JQ, _ = line_residuals(problem.cam, pose, PQ[:, :3], PQ[:, 3:],
                                                  problem.lobs_coeff_r[sel], shift=b)
                le[sel, 2:], lJp[sel, 2:] = e, Jp
                lJx[sel, 2:, :3] = JP
                lJx[sel, 2:, 3:] = JQ
    return Linearization(pe, pJp, pJx, le, lJp, lJx, pv, lv)


def robust_weights(lin: Linearization, delta: float) -> tuple[np.ndarray, np.ndarray]:
    wp = pseudo_huber_weight(np.einsum("ni,ni->n", lin.pe, lin.pe), delta) * lin.p_valid
    wl = pseudo_huber_weight(np.einsum("ni,ni->n", lin.le, lin.le), delta) * lin.l_valid
    return wp, wl


def robust_cost(lin: Linearization, delta: float) -> float:
    sp = np.einsum("ni,ni->n", lin.pe, lin.pe)[lin.p_valid]
    sl = np.einsum("ni,ni->n", lin.le, lin.le)[lin.l_valid]
    return float(pseudo_huber(sp, delta).sum() + pseudo_huber(sl, delta).sum())


@dataclass
class BlockHessian:
    """Arrow-shaped normal matrix; the point-line cross block is identically zero."""

    pose_pose: np.ndarray    # (6K, 6K)
    pose_point: np.ndarray   # (6K, 3Np)
    pose_line: np.ndarray    # (6K, 6Nl)
    point_point: np.ndarray  # (Np, 3, 3)
    line_line: np.ndarray    # (Nl, 6, 6)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return self.pose_pose.shape[0], 3 * len(self.point_point), 6 * len(self.line_line)

    def to_dense(self) -> np.ndarray:
        a, b, c = self.sizes
        H = np.zeros((a + b + c, a + b + c))
        H[:a, :a] = self.pose_pose
        H[:a, a:a + b] = self.pose_point
        H[a:a + b, :a] = self.pose_point.T
        H[:a, a + b:] = self.pose_line
        H[a + b:, :a] = self.pose_line.T
        for i, blk in enumerate(self.point_point):
            H[a + 3 * i:a + 3 * i + 3, a + 3 * i:a + 3 * i + 3] = blk
        for i, blk in enumerate(self.line_line):
            o = a + b + 6 * i
            H[o:o + 6, o:o + 6] = blk
        return H


def assemble_hessian(problem: LocalBAProblem, weights: tuple[np.ndarray, np.ndarray],
                     lin: Optional[Linearization] = None) -> tuple[BlockHessian, np.ndarray]:
    """Accumulate ``J^T W J`` and ``J^T W e`` observation by observation into their blocks."""
    if lin is None:
        lin = linearize(problem)
    wp, wl = weights
    K, Np, Nl = problem.n_free
    pv, xv, lv = problem.pose_var, problem.point_var, problem.line_var
    Hpp = np.zeros((K, K, 6, 6))
    Hpx = np.zeros((K, max(Np, 0), 6, 3))
    Hpl = np.zeros((K, max(Nl, 0), 6, 6))
    Hxx = np.zeros((Np, 3, 3))
    Hll = np.zeros((Nl, 6, 6))
    gp = np.zeros((K, 6)); gx = np.zeros((Np, 3)); gl = np.zeros((Nl, 6))

    for e, Jpose, Jlm, w, kf, lm, var, Hlm_d, Hcross, glm, dim in (
        (lin.pe, lin.pJ_pose, lin.pJ_lm, wp, problem.pobs_kf, problem.pobs_lm, xv, Hxx, Hpx, gx, 3),
        (lin.le, lin.lJ_pose, lin.lJ_lm, wl, problem.lobs_kf, problem.lobs_lm, lv, Hll, Hpl, gl, 6),
    ):
        if len(e) == 0:
            continue
        k = pv[kf]
        j = var[lm]
        fk = k >= 0
        fj = j >= 0
        WJp = Jpose * w[:, None, None]
        WJl = Jlm * w[:, None, None]
        np.add.at(Hpp, (k[fk], k[fk]), np.einsum("nia,nib->nab", WJp[fk], Jpose[fk]))
        np.add.at(gp, k[fk], np.einsum("nia,ni->na", WJp[fk], e[fk]))
        np.add.at(Hlm_d, j[fj], np.einsum("nia,nib->nab", WJl[fj], Jlm[fj]))
        np.add.at(glm, j[fj], np.einsum("nia,ni->na", WJl[fj], e[fj]))
        both = fk & fj
        np.add.at(Hcross, (k[both], j[both]), np.einsum("nia,nib->nab", WJp[both], Jlm[both]))

    H = BlockHessian(
        Hpp.transpose(0, 2, 1, 3).reshape(6 * K, 6 * K),
        Hpx.transpose(0, 2, 1, 3).reshape(6 * K, 3 * Np),
        Hpl.transpose(0, 2, 1, 3).reshape(6 * K, 6 * Nl),
        Hxx, Hll,
    )
    g = np.concatenate([gp.reshape(-1), gx.reshape(-1), gl.reshape(-1)])
    return H, g


def _batched_inv(blocks: np.ndarray) -> np.ndarray:
    if len(blocks) == 0:
        return blocks.copy()
    return np.linalg.inv(blocks)


def solve_schur(H: BlockHessian, g: np.ndarray, lam: float, line_damping: float = 0.0) -> np.ndarray:
    """Solve ``(H + lam diag(H)) dx = -g`` by eliminating landmarks first."""
    a, b, c = H.sizes
    Np, Nl = len(H.point_point), len(H.line_line)
    gp, gx, gl = g[:a], g[a:a + b].reshape(Np, 3), g[a + b:].reshape(Nl, 6)
    App = H.pose_pose + lam * np.diag(np.diag(H.pose_pose))
    eye3, eye6 = np.eye(3), np.eye(6)
    Axx = H.point_point + lam * H.point_point * eye3
    All = H.line_line + lam * H.line_line * eye6 + line_damping * eye6
    Axx_inv = _batched_inv(Axx)
    All_inv = _batched_inv(All)
    S = App.copy()
    rhs = -gp.copy()
    if Np:
        W = H.pose_point.reshape(a, Np, 3)
        WV = np.einsum("anj,njk->ank", W, Axx_inv)
        S -= WV.reshape(a, b) @ H.pose_point.T
        rhs += WV.reshape(a, b) @ gx.reshape(-1)
    if Nl:
        W = H.pose_line.reshape(a, Nl, 6)
        WV = np.einsum("anj,njk->ank", W, All_inv)
        S -= WV.reshape(a, c) @ H.pose_line.T
        rhs += WV.reshape(a, c) @ gl.reshape(-1)
    dp = np.linalg.solve(S, rhs) if a else np.zeros(0)
    dx = np.zeros((Np, 3))
    dl = np.zeros((Nl, 6))
    if Np:
        r = -gx - (H.pose_point.T @ dp).reshape(Np, 3)
        dx = np.einsum("njk,nk->nj", Axx_inv, r)
    if Nl:
        r = -gl - (H.pose_line.T @ dp).reshape(Nl, 6)
        dl = np.einsum("njk,nk->nj", All_inv, r)
    return np.concatenate([dp, dx.reshape(-1), dl.reshape(-1)])


def apply_update(problem: LocalBAProblem, dx: np.ndarray) -> None:
    """Box-plus: left exponential update for poses, addition for landmarks."""
    K, Np, Nl = problem.n_free
    dp = dx[:6 * K].reshape(K, 6)
    dX = dx[6 * K:6 * K + 3 * Np].reshape(Np, 3)
    dL = dx[6 * K + 3 * Np:].reshape(Nl, 6)
    poses = list(problem.poses)
    for i, v in enumerate(problem.pose_var):
        if v >= 0:
            poses[i] = se3_exp(dp[v]) @ poses[i]
    problem.poses = poses
    problem.points = problem.points.copy()
    problem.points[problem.point_free] += dX
    problem.lines = problem.lines.copy()
    problem.lines[problem.line_free] += dL


@dataclass
class BAResult:
    cost_initial: float
    cost_final: float
    iterations: int
    status: str
    costs: list
    first_step_norm: float

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def local_bundle_adjustment(problem: LocalBAProblem, cfg: BAConfig = BAConfig()) -> BAResult:
    """Levenberg-Marquardt over free poses and landmarks; updates ``problem`` in place.

    Robust (Pseudo-Huber) IRLS weights are recomputed at every linearisation;
    an update is accepted only if it lowers the robust cost. Failures do not
    raise: the best iterate is kept and ``status`` reports what happened.
    """
    lin = linearize(problem)
    cost = robust_cost(lin, cfg.huber_delta)
    costs = [cost]
    lam = cfg.lambda_init
    status = "max_iterations"
    first_step = None
    it = 0
    if sum(problem.n_free) == 0:
        return BAResult(cost, cost, 0, "converged", costs, 0.0)
    while it < cfg.max_iterations:
        it += 1
        H, g = assemble_hessian(problem, robust_weights(lin, cfg.huber_delta), lin)
        try:
            dx = solve_schur(H, g, lam, cfg.line_damping)
        except np.linalg.LinAlgError:
            lam *= cfg.lambda_up
            if lam > cfg.lambda_max:
                status = "ill_conditioned"
                break
            continue
        if not np.all(np.isfinite(dx)):
            status = "ill_conditioned"
            break
        step = float(np.linalg.norm(dx))
        if first_step is None:
            first_step = step
        if step < cfg.step_tolerance:
            status = "converged"
            break
        saved = problem.copy_state()
        apply_update(problem, dx)
        lin_new = linearize(problem)
        cost_new = robust_cost(lin_new, cfg.huber_delta)
        if cost_new < cost:
            rel = (cost - cost_new) / max(cost, 1e-300)
            lin, cost = lin_new, cost_new
            costs.append(cost)
            lam = max(lam * cfg.lambda_down, 1e-12)
            if rel < cfg.relative_cost_tolerance or cost == 0.0:
                status = "converged"
                break
        else:
            problem.set_state(saved)
            if abs(cost_new - cost) <= cfg.relative_cost_tolerance * max(cost, 1e-300):
                status = "converged"
                break
            lam *= cfg.lambda_up
            if lam > cfg.lambda_max:
                status = "diverged"
                log.warning("local BA: damping exceeded %.0e, keeping best iterate", cfg.lambda_max)
                break
    return BAResult(costs[0], cost, it, status, costs, first_step or 0.0)


def reprojection_errors(problem: LocalBAProblem) -> tuple[np.ndarray, np.ndarray]:
    """Left-image residual norms (pixels) of point and line observations at the current state."""
    lin = linearize(problem)
    return np.linalg.norm(lin.pe[:, :2], axis=1), np.linalg.norm(lin.le[:, :2], axis=1)


# -- keyframe insertion helpers -------------------------------------------------


def _landmark_xyz_in(wmap: WorldMap, kf: KeyFrame) -> tuple[np.ndarray, np.ndarray]:
    """Per-observation map coordinates (in the keyframe's camera frame), NaN if unbound."""
    pts = np.full((len(kf.points), 3), np.nan)
    for i, l in enumerate(kf.point_lm):
        if l is not None and l in wmap.points and len(wmap.points[l].observations) >= 2:
            pts[i] = kf.pose.apply(wmap.points[l].position)
    lns = np.full((len(kf.lines), 6), np.nan)
    for i, l in enumerate(kf.line_lm):
        if l is not None and l in wmap.lines and len(wmap.lines[l].observations) >= 2:
            lm = wmap.lines[l]
            lns[i] = np.concatenate([kf.pose.apply(lm.P), kf.pose.apply(lm.Q)])
    bad = pts[:, 2] <= Z_MIN
    pts[bad] = np.nan
    bad = (lns[:, 2] <= Z_MIN) | (lns[:, 5] <= Z_MIN)
    lns[bad] = np.nan
    return pts, lns


def match_frames(a: Frame, b: Frame, mcfg: MatchingConfig, use_points: bool = True, use_lines: bool = True):
    pm = match_descriptors(a.point_desc, b.point_desc, mcfg.ratio, mcfg.max_hamming) if use_points and \
        len(a.points) and len(b.points) else []
    lm = []
    if use_lines and len(a.lines) and len(b.lines):
        lm = match_descriptors(a.line_desc, b.line_desc, mcfg.ratio, mcfg.max_hamming)
        lm = filter_line_matches(lm, a.lines, b.lines, mcfg.angle_tol, mcfg.length_tol, mcfg.disp_tol)
    return pm, lm


@dataclass
class Refinement:
    estimate: MotionEstimate
    point_matches: list
    line_matches: list
    refined: bool


def refine_relative_pose(wmap: WorldMap, prev_kf: KeyFrame, cur_kf: KeyFrame, cfg: SolverConfig = SolverConfig(),
                         mcfg: MatchingConfig = MatchingConfig(), use_points: bool = True,
                         use_lines: bool = True) -> Refinement:
    """Re-estimate the motion prev -> cur, seeded with ``cur_kf.pose``.

    On success ``cur_kf.pose`` / ``cur_kf.relative`` are overwritten and the
    inlier matches to bound landmarks are copied into ``cur_kf`` bindings.
    Too few matches leave the VO estimate in place.
    """
    pm, lm = match_frames(prev_kf.frame, cur_kf.frame, mcfg, use_points, use_lines)
    pts, lns = _landmark_xyz_in(wmap, prev_kf)
    pair, pm, lm = build_frame_pair(wmap.camera, prev_kf.frame, cur_kf.frame, pm, lm, pts, lns)
    init = cur_kf.pose @ prev_kf.pose.inverse()
    try:
        sol = solve_motion(pair, wmap.camera, cfg, init)
    except (InsufficientMatches, SolverDiverged, IllConditioned) as exc:
        log.info("keyframe refinement skipped (%s); keeping VO estimate", exc)
        return Refinement(cur_kf.relative, [], [], False)
    est = sol.estimate()
    cur_kf.relative = est
    cur_kf.pose = sol.pose @ prev_kf.pose
    pm = [m for m, ok in zip(pm, sol.point_inliers) if ok]
    lm = [m for m, ok in zip(lm, sol.line_inliers) if ok]
    for m in pm:
        cur_kf.point_lm[m.index_b] = prev_kf.point_lm[m.index_a]
    for m in lm:
        cur_kf.line_lm[m.index_b] = prev_kf.line_lm[m.index_a]
    return Refinement(est, pm, lm, True)


def new_landmark_positions(cam: StereoCamera, kf: KeyFrame) -> tuple[dict, dict]:
    """World positions for every unbound observation with usable disparity."""
    Twc = kf.pose.inverse()
    fr = kf.frame
    pts = {}
    idx = [i for i, l in enumerate(kf.point_lm) if l is None and fr.point_disp[i] > D_MIN]
    if idx:
        X = Twc.apply(backproject_many(cam, fr.point_uv[idx], fr.point_disp[idx]))
        pts = {i: X[k] for k, i in enumerate(idx)}
    lns = {}
    idx = [i for i, l in enumerate(kf.line_lm) if l is None and np.all(fr.line_disp[i] > D_MIN)]
    if idx:
        P = Twc.apply(backproject_many(cam, fr.line_pq[idx, :2], fr.line_disp[idx, 0]))
        Q = Twc.apply(backproject_many(cam, fr.line_pq[idx, 2:], fr.line_disp[idx, 1]))
        lns = {i: (P[k], Q[k]) for k, i in enumerate(idx)}
    return pts, lns


def _projected_line_obs(cam: StereoCamera, Xp: np.ndarray, Xq: np.ndarray, desc) -> LineObservation:
    p = project_camera(cam, Xp)
    q = project_camera(cam, Xq)
    return LineObservation(p, q, float(disparity_of(cam, Xp)), float(disparity_of(cam, Xq)), desc)


def project_and_merge(wmap: WorldMap, kf_id: int, point_obs: list, line_obs: list, cand_points: list,
                      cand_lines: list, mcfg: MatchingConfig = MatchingConfig()) -> int:
    """Merge the landmarks behind the given observations into projected candidates.

    For each listed observation of keyframe ``kf_id``, candidates projecting in
    front of the camera within ``mcfg.window`` pixels compete on descriptor
    distance; the winner must pass ``max_hamming``, the ratio test, a mutual
    check and, for lines, the orientation/disparity filter. The candidate is
    kept, the observation's current landmark is merged into it.
    """
    kf = wmap.keyframe(kf_id)
    cam = wmap.camera
    merged = 0
    if cand_points and point_obs:
        Xc = kf.pose.apply(np.array([wmap.points[l].position for l in cand_points]))
        front = Xc[:, 2] > Z_MIN
        uv = np.full((len(cand_points), 2), np.inf)
        uv[front] = project_camera(cam, Xc[front])
        descs = np.array([wmap.points[l].descriptor for l in cand_points])
        near = np.linalg.norm(kf.frame.point_uv[point_obs][:, None, :] - uv[None, :, :], axis=2) <= mcfg.window
        D = np.where(near, hamming_matrix(kf.frame.point_desc[point_obs], descs), _FAR)
        for r, c in _select(D, mcfg):
            if wmap.merge_landmarks(cand_points[c], kf.point_lm[point_obs[r]]) >= 0:
                merged += 1

    if cand_lines and line_obs:
        Pc = kf.pose.apply(np.array([wmap.lines[l].P for l in cand_lines]))
        Qc = kf.pose.apply(np.array([wmap.lines[l].Q for l in cand_lines]))
        front = (Pc[:, 2] > Z_MIN) & (Qc[:, 2] > Z_MIN)
        coeff = kf.frame.line_coeffs[line_obs]
        dist = np.full((len(line_obs), len(cand_lines)), np.inf)
        if front.any():
            up = project_camera(cam, Pc[front])
            uq = project_camera(cam, Qc[front])
            dp = np.abs(coeff[:, :2] @ up.T + coeff[:, 2:3])
            dq = np.abs(coeff[:, :2] @ uq.T + coeff[:, 2:3])
            dist[:, front] = np.maximum(dp, dq)
        descs = np.array([wmap.lines[l].descriptor for l in cand_lines])
        D = np.where(dist <= mcfg.window, hamming_matrix(kf.frame.line_desc[line_obs], descs), _FAR)
        for r, c in _select(D, mcfg):
            i = line_obs[r]
            proj = _projected_line_obs(cam, Pc[c], Qc[c], descs[c])
            # lengths are not compared: map endpoints come from another, differently truncated view
            if not line_pair_consistent(proj, kf.lines[i], mcfg.angle_tol, 1.0 - 1e-9, mcfg.disp_tol):
                continue
            if wmap.merge_landmarks(cand_lines[c], kf.line_lm[i]) >= 0:
                merged += 1
    return merged


_FAR = 10_000


def _select(D: np.ndarray, mcfg: MatchingConfig) -> list[tuple[int, int]]:
    """Row/column pairs that are mutual minima, under max_hamming, passing the ratio test."""
    out = []
    if D.size == 0:
        return out
    best_c = np.argmin(D, axis=1)
    best_r = np.argmin(D, axis=0)
    for r, c in enumerate(best_c):
        d = D[r, c]
        if d > mcfg.max_hamming or best_r[c] != r:
            continue
        row = np.delete(D[r], c)
        col = np.delete(D[:, c], r)
        second = min(row.min() if row.size else _FAR, col.min() if col.size else _FAR)
        if d * mcfg.ratio < second:
            out.append((r, int(c)))
    return out


def associate_unmatched(wmap: WorldMap, kf_id: int, mcfg: MatchingConfig = MatchingConfig(),
                        local: Optional[tuple[set, set]] = None) -> int:
    """Bind this keyframe's fresh observations to nearby local-map landmarks.

    A fresh observation is one whose landmark is seen by this keyframe only.
    Candidates are local landmarks not already observed here; a successful
    association merges the fresh landmark into the old one. Returns the
    number of new bindings.
    """
    kf = wmap.keyframe(kf_id)
    _, lms = local if local is not None else wmap.local_map_of(kf_id)
    seen = kf.landmark_ids()
    cand_p = sorted(l for l in lms if l in wmap.points and l not in seen)
    cand_l = sorted(l for l in lms if l in wmap.lines and l not in seen)
    fresh_p = [i for i, l in enumerate(kf.point_lm)
               if l is not None and len(wmap.points[l].observations) == 1]
    fresh_l = [i for i, l in enumerate(kf.line_lm)
               if l is not None and len(wmap.lines[l].observations) == 1]
    return project_and_merge(wmap, kf_id, fresh_p, fresh_l, cand_p, cand_l, mcfg)


def prune_observations(wmap: WorldMap, problem: LocalBAProblem, max_error: float) -> int:
    """Unbind observations whose residual norm exceeds ``max_error`` pixels."""
    ep, el = reprojection_errors(problem)
    removed = 0
    for (k, _), lidx, e in zip(problem.pobs_ref, problem.pobs_lm, ep):
        if e > max_error:
            lid = problem.point_ids[lidx]
            if lid in wmap.points and any(o[0] == k for o in wmap.points[lid].observations):
                wmap.remove_observation(lid, k)
                removed += 1
    for (k, _), lidx, e in zip(problem.lobs_ref, problem.lobs_lm, el):
        if e > max_error:
            lid = problem.line_ids[lidx]
            if lid in wmap.lines and any(o[0] == k for o in wmap.lines[lid].observations):
                wmap.remove_observation(lid, k)
                removed += 1
    for table in (wmap.points, wmap.lines):
        for lid in [l for l, lm in table.items() if not lm.observations]:
            table.pop(lid)
    return removed
