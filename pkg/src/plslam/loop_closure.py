"""Place recognition with separate point/line vocabularies, loop gating, PGO and map fusion."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import Disconnected, IllConditioned, InsufficientMatches, NoFeatures, SolverDiverged
from .features import Match, hamming_matrix
from .lie import (
    MotionEstimate, Pose, adjoint, rotation_angle, se3_exp, se3_left_jacobian_inv, se3_log,
)
from .local_mapping import MatchingConfig, build_frame_pair, match_frames, project_and_merge
from .odometry import FramePair, SolverConfig, solve_motion
from .world_map import WorldMap

log = logging.getLogger(__name__)

WordVector = dict  # word id -> weight


# -- vocabulary ------------------------------------------------------------------


class Vocabulary:
    """Seeded bit-sampling hash from 256-bit descriptors to ``size`` words.

    Each bit of the word id is the majority vote of ``votes`` descriptor bits
    drawn (without replacement) by a PCG64 generator seeded with ``seed``. The
    default of one tap per bit keeps words most stable under bit flips.
    """

    def __init__(self, size: int = 1024, seed: int = 0, votes: int = 1):
        if size < 2:
            raise ValueError("vocabulary needs at least 2 words")
        if votes % 2 == 0:
            raise ValueError("votes must be odd")
        self.size = size
        self.seed = seed
        self.n_bits = int(math.ceil(math.log2(size)))
        rng = np.random.Generator(np.random.PCG64(seed))
        self.taps = rng.choice(256, size=self.n_bits * votes, replace=False).reshape(self.n_bits, votes)
        self._weights = (1 << np.arange(self.n_bits)).astype(np.int64)

    def words(self, descriptors) -> np.ndarray:
        d = np.asarray(descriptors, dtype=np.uint8).reshape(-1, 32)
        if len(d) == 0:
            return np.zeros(0, dtype=np.int64)
        bits = np.unpackbits(d, axis=1)
        votes = bits[:, self.taps].sum(axis=2)
        code = (votes * 2 > self.taps.shape[1]).astype(np.int64) @ self._weights
        return code % self.size


def word_counts(vocab: Vocabulary, descriptors) -> dict[int, int]:
    w, c = np.unique(vocab.words(descriptors), return_counts=True)
    return {int(a): int(b) for a, b in zip(w, c)}


def _weighted(counts: dict[int, int], idf) -> WordVector:
    if not counts:
        return {}
    total = sum(counts.values())
    vec = {w: (n / total) * idf(w) for w, n in counts.items()}
    s = sum(vec.values())
    return {w: v / s for w, v in vec.items()} if s > 0 else {}


def word_vector(descriptors, vocab: Optional[Vocabulary] = None, db: Optional["SimilarityDatabase"] = None,
                kind: str = "points") -> WordVector:
    """L1-normalised tf-idf vector; idf comes from ``db`` when given, else 1."""
    vocab = vocab or (db.vocab if db is not None else Vocabulary())
    counts = word_counts(vocab, descriptors)
    idf = (lambda w: db.idf(kind, w)) if db is not None else (lambda w: 1.0)
    return _weighted(counts, idf)


def similarity(a: WordVector, b: WordVector) -> float:
    """``1 - 0.5 * |a - b|_1`` for L1-normalised vectors; 0 when either is empty."""
    if not a or not b:
        return 0.0
    l1 = sum(abs(a.get(w, 0.0) - b.get(w, 0.0)) for w in set(a) | set(b))
    return float(min(1.0, max(0.0, 1.0 - 0.5 * l1)))


def dispersion(features: Sequence) -> float:
    """sqrt(var_x + var_y) of pixel positions (population variance).

    Items may be (x, y) pairs or segments given as (px, py, qx, qy) /
    objects with a ``midpoint``; segments contribute their midpoints.
    """
    pts = []
    for f in features:
        if hasattr(f, "midpoint"):
            pts.append(f.midpoint)
        else:
            a = np.asarray(f, dtype=float).reshape(-1)
            pts.append(a if a.size == 2 else 0.5 * (a[:2] + a[2:4]))
    if len(pts) <= 1:
        return 0.0
    P = np.array(pts)
    return float(np.sqrt(P[:, 0].var() + P[:, 1].var()))


def fused_similarity(s_k: float, s_l: float, n_k: float, n_l: float, d_k: float, d_l: float) -> float:
    """Total score weighting point and line similarities by feature count and spread."""
    n = n_k + n_l
    if n <= 0:
        raise NoFeatures("no keypoints and no segments")
    d = d_k + d_l
    fk, fl = (0.5, 0.5) if d == 0 else (d_k / d, d_l / d)
    return 0.5 * (n_k / n + fk) * s_k + 0.5 * (n_l / n + fl) * s_l


# -- database -------------------------------------------------------------------


@dataclass(eq=False)
class _Entry:
    counts: dict
    n_features: dict
    dispersion: dict


class SimilarityDatabase:
    """Per-keyframe word counts for points and lines with an inverted index."""

    KINDS = ("points", "lines")

    def __init__(self, vocab: Optional[Vocabulary] = None):
        self.vocab = vocab or Vocabulary()
        self.entries: dict[int, _Entry] = {}
        self.inverted: dict[str, dict[int, set[int]]] = {k: {} for k in self.KINDS}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, kf_id: int) -> bool:
        return kf_id in self.entries

    def add(self, kf_id: int, point_descs, line_descs, point_uv=None, line_pq=None) -> None:
        counts = {"points": word_counts(self.vocab, point_descs), "lines": word_counts(self.vocab, line_descs)}
        nf = {"points": len(np.asarray(point_descs).reshape(-1, 32)), "lines": len(np.asarray(line_descs).reshape(-1, 32))}
        disp = {"points": dispersion(point_uv if point_uv is not None else []),
                "lines": dispersion(line_pq if line_pq is not None else [])}
        self.entries[kf_id] = _Entry(counts, nf, disp)
        for kind in self.KINDS:
            for w in counts[kind]:
                self.inverted[kind].setdefault(w, set()).add(kf_id)

    def idf(self, kind: str, word: int) -> float:
        n = len(self.entries)
        df = len(self.inverted[kind].get(word, ()))
        return math.log((1.0 + n) / (1.0 + df)) + 1.0

    def vector(self, kf_id: int, kind: str) -> WordVector:
        return _weighted(self.entries[kf_id].counts[kind], lambda w: self.idf(kind, w))

    def candidates(self, kf_id: int, kind: str) -> set[int]:
        """Keyframes sharing at least one word with ``kf_id``."""
        out: set[int] = set()
        for w in self.entries[kf_id].counts[kind]:
            out |= self.inverted[kind].get(w, set())
        out.discard(kf_id)
        return out

    def score(self, query: int, other: int, use_points: bool = True, use_lines: bool = True) -> float:
        e = self.entries[query]
        s_k = similarity(self.vector(query, "points"), self.vector(other, "points")) if use_points else 0.0
        s_l = similarity(self.vector(query, "lines"), self.vector(other, "lines")) if use_lines else 0.0
        n_k = e.n_features["points"] if use_points else 0
        n_l = e.n_features["lines"] if use_lines else 0
        d_k = e.dispersion["points"] if use_points else 0.0
        d_l = e.dispersion["lines"] if use_lines else 0.0
        if n_k + n_l == 0:
            return 0.0
        return fused_similarity(s_k, s_l, n_k, n_l, d_k, d_l)


# -- detection ----------------------------------------------------------------------


@dataclass(frozen=True)
class LoopConfig:
    min_db_size: int = 20
    recent: int = 10
    s_min: float = 0.3
    n_seq: int = 3
    beta: float = 0.5
    max_eigenvalue: float = 0.01
    max_translation: float = 0.50
    max_rotation_deg: float = 3.00
    min_inlier_ratio: float = 0.50
    magnitude_gate: bool = True
    vocabulary_size: int = 1024
    vocabulary_seed: int = 0


@dataclass
class LoopCandidate:
    current: int
    old: int
    score: float
    estimate: Optional[MotionEstimate] = None
    inlier_ratio: float = 0.0
    point_pairs: list = field(default_factory=list)  # (current obs idx, old-side landmark id)
    line_pairs: list = field(default_factory=list)


@dataclass
class LoopRejection:
    current: int
    old: int
    reason: str
    detail: str = ""


def detect_loop_candidate(db: SimilarityDatabase, wmap: WorldMap, cur_kf: int, cfg: LoopConfig = LoopConfig(),
                          use_points: bool = True, use_lines: bool = True) -> Optional[LoopCandidate]:
    """Best-scoring old keyframe whose preceding sequence also looks alike."""
    order = sorted(k for k in db.entries if k <= cur_kf)
    if cur_kf not in db or len(order) < cfg.min_db_size:
        return None
    pos = order.index(cur_kf)
    excluded = set(order[max(0, pos - cfg.recent):pos + 1])
    excluded |= set(wmap.covisible(cur_kf)) if cur_kf in wmap.keyframes else set()
    pool: set[int] = set()
    if use_points:
        pool |= db.candidates(cur_kf, "points")
    if use_lines:
        pool |= db.candidates(cur_kf, "lines")
    pool = {k for k in pool - excluded if k < cur_kf}
    if not pool:
        return None
    scored = sorted(((db.score(cur_kf, k, use_points, use_lines), -k) for k in pool), reverse=True)
    s_t, neg = scored[0]
    cand = -neg
    if s_t < cfg.s_min:
        return None
    cpos = order.index(cand)
    for i in range(1, cfg.n_seq + 1):
        if pos - i < 0:
            return None
        q = order[pos - i]
        o = order[max(cpos - i, 0)]
        if q == o or db.score(q, o, use_points, use_lines) < cfg.beta * s_t:
            return None
    return LoopCandidate(cur_kf, cand, s_t)


def similarity_matrix(db: SimilarityDatabase, use_points: bool = True, use_lines: bool = True) -> tuple[list, np.ndarray]:
    ids = sorted(db.entries)
    M = np.zeros((len(ids), len(ids)))
    for a, i in enumerate(ids):
        for b, j in enumerate(ids):
            M[a, b] = 1.0 if i == j else db.score(i, j, use_points, use_lines)
    return ids, M


# -- loop transform -------------------------------------------------------------------


def estimate_loop_transform(wmap: WorldMap, cur_kf: int, old_kf: int, cfg: LoopConfig = LoopConfig(),
                            solver: SolverConfig = SolverConfig(), mcfg: MatchingConfig = MatchingConfig(),
                            use_points: bool = True, use_lines: bool = True, score: float = 0.0):
    """Relative pose current <- old, gated on uncertainty, magnitude and inliers.

    Correspondences come from descriptor matching against the old keyframe
    and against the landmarks of its local map. Returns a
    :class:`LoopCandidate` on success, a :class:`LoopRejection` otherwise.
    """
    cur = wmap.keyframe(cur_kf)
    old = wmap.keyframe(old_kf)
    pm, lm = match_frames(old.frame, cur.frame, mcfg, use_points, use_lines)
    pair, pm, lm = build_frame_pair(wmap.camera, old.frame, cur.frame, pm, lm)
    p_land = [old.point_lm[m.index_a] for m in pm]
    l_land = [old.line_lm[m.index_a] for m in lm]
    p_cur = [m.index_b for m in pm]
    l_cur = [m.index_b for m in lm]
    # refined landmark positions beat single-frame triangulation
    for r, lid in enumerate(p_land):
        if lid is not None and lid in wmap.points:
            pair.points_3d[r] = old.pose.apply(wmap.points[lid].position)
    for r, lid in enumerate(l_land):
        if lid is not None and lid in wmap.lines:
            pair.lines_P[r] = old.pose.apply(wmap.lines[lid].P)
            pair.lines_Q[r] = old.pose.apply(wmap.lines[lid].Q)

    # extra correspondences against the old keyframe's local map
    _, lms = wmap.local_map_of(old_kf)
    used_p, used_l = set(p_cur), set(l_cur)
    extra_X, extra_uv, extra_P, extra_Q, extra_l = [], [], [], [], []
    if use_points:
        ids = sorted(l for l in lms if l in wmap.points and l not in set(p_land))
        free = [i for i in range(len(cur.points)) if i not in used_p]
        if ids and free:
            D = hamming_matrix(cur.frame.point_desc[free], [wmap.points[l].descriptor for l in ids])
            for m in _mutual(D, mcfg):
                X = old.pose.apply(wmap.points[ids[m.index_b]].position)
                if X[2] > 1e-3:
                    extra_X.append(X)
                    extra_uv.append(cur.frame.point_uv[free[m.index_a]])
                    p_cur.append(free[m.index_a])
                    p_land.append(ids[m.index_b])
    if use_lines:
        ids = sorted(l for l in lms if l in wmap.lines and l not in set(l_land))
        free = [i for i in range(len(cur.lines)) if i not in used_l]
        if ids and free:
            D = hamming_matrix(cur.frame.line_desc[free], [wmap.lines[l].descriptor for l in ids])
            for m in _mutual(D, mcfg):
                lmk = wmap.lines[ids[m.index_b]]
                P, Q = old.pose.apply(lmk.P), old.pose.apply(lmk.Q)
                if P[2] > 1e-3 and Q[2] > 1e-3:
                    extra_P.append(P)
                    extra_Q.append(Q)
                    extra_l.append(cur.frame.line_coeffs[free[m.index_a]])
                    l_cur.append(free[m.index_a])
                    l_land.append(ids[m.index_b])
    full = FramePair(
        np.vstack([pair.points_3d, np.array(extra_X).reshape(-1, 3)]),
        np.vstack([pair.points_obs, np.array(extra_uv).reshape(-1, 2)]),
        np.vstack([pair.lines_P, np.array(extra_P).reshape(-1, 3)]),
        np.vstack([pair.lines_Q, np.array(extra_Q).reshape(-1, 3)]),
        np.vstack([pair.lines_obs, np.array(extra_l).reshape(-1, 3)]),
    )
    try:
        sol = solve_motion(full, wmap.camera, solver, None)
    except InsufficientMatches as exc:
        return LoopRejection(cur_kf, old_kf, "InsufficientMatches", str(exc))
    except (SolverDiverged, IllConditioned) as exc:
        return LoopRejection(cur_kf, old_kf, "EigenvalueGate", str(exc))
    est = sol.estimate()
    max_eig = float(np.linalg.eigvalsh(est.covariance).max())
    if not max_eig < cfg.max_eigenvalue:
        return LoopRejection(cur_kf, old_kf, "EigenvalueGate", f"max eigenvalue {max_eig:.3g}")
    trans = float(np.linalg.norm(sol.pose.t))
    rot = math.degrees(rotation_angle(sol.pose.R))
    if cfg.magnitude_gate and (trans > cfg.max_translation or rot > cfg.max_rotation_deg):
        return LoopRejection(cur_kf, old_kf, "MagnitudeGate", f"{trans:.3f} m / {rot:.2f} deg")
    if not sol.inlier_ratio > cfg.min_inlier_ratio:
        return LoopRejection(cur_kf, old_kf, "InlierGate", f"inlier ratio {sol.inlier_ratio:.2f}")
    pp = [(c, l) for c, l, ok in zip(p_cur, p_land, sol.point_inliers) if ok and l is not None]
    lp = [(c, l) for c, l, ok in zip(l_cur, l_land, sol.line_inliers) if ok and l is not None]
    return LoopCandidate(cur_kf, old_kf, score, est, sol.inlier_ratio, pp, lp)


def _mutual(D: np.ndarray, mcfg: MatchingConfig) -> list[Match]:
    from .features import Match as _M
    out = []
    if D.size == 0:
        return out
    bc = np.argmin(D, axis=1)
    br = np.argmin(D, axis=0)
    for r, c in enumerate(bc):
        d = int(D[r, c])
        if br[c] != r or d > mcfg.max_hamming:
            continue
        row = np.delete(D[r], c)
        if row.size and not d * mcfg.ratio < row.min():
            continue
        out.append(_M(r, int(c), d))
    return out


# -- pose graph -------------------------------------------------------------------------


def pose_graph_residual(T_i: Pose, T_j: Pose, Z: Pose):
    """``r = log(Z T_j T_i^-1)`` and its Jacobians w.r.t. left perturbations of T_i and T_j."""
    E = Z @ T_j @ T_i.inverse()
    r = se3_log(E)
    Jinv = se3_left_jacobian_inv(r)
    return r, -Jinv @ adjoint(E), Jinv @ adjoint(Z)


@dataclass
class PGOResult:
    poses: dict
    costs: list
    iterations: int
    status: str


def optimize_pose_graph(poses: dict, edges: list, fixed: Sequence[int], max_iterations: int = 100,
                        tolerance: float = 1e-12, lambda_init: float = 1e-6) -> PGOResult:
    """Levenberg-Marquardt over keyframe poses with unit-information SE(3) edges.

    ``edges`` holds ``(i, j, Z)`` with ``Z`` the measured ``T_i T_j^-1``.
    """
    ids = sorted(poses)
    fixed = set(fixed)
    adj: dict[int, set] = {k: set() for k in ids}
    for i, j, _ in edges:
        adj[i].add(j)
        adj[j].add(i)
    seen = set(fixed & set(ids))
    stack = list(seen)
    while stack:
        k = stack.pop()
        for n in adj[k] - seen:
            seen.add(n)
            stack.append(n)
    if seen != set(ids):
        raise Disconnected(f"{len(set(ids) - seen)} keyframes unreachable from the fixed set")
    free = [k for k in ids if k not in fixed]
    var = {k: n for n, k in enumerate(free)}
    cur = dict(poses)

    def cost_of(P):
        return sum(float(np.sum(se3_log(Z @ P[j] @ P[i].inverse()) ** 2)) for i, j, Z in edges)

    cost = cost_of(cur)
    costs = [cost]
    lam = lambda_init
    status = "max_iterations"
    it = 0
    n = 6 * len(free)
    for it in range(1, max_iterations + 1):
        H = np.zeros((n, n))
        g = np.zeros(n)
        for i, j, Z in edges:
            r, Ji, Jj = pose_graph_residual(cur[i], cur[j], Z)
            blocks = [(var.get(i), Ji), (var.get(j), Jj)]
            for a, Ja in blocks:
                if a is None:
                    continue
                g[6 * a:6 * a + 6] += Ja.T @ r
                for b, Jb in blocks:
                    if b is None:
                        continue
                    H[6 * a:6 * a + 6, 6 * b:6 * b + 6] += Ja.T @ Jb
        if not n or float(np.abs(g).max()) < tolerance:
            status = "converged"
            break
        while True:
            A = H + lam * np.diag(np.diag(H))
            step = -np.linalg.solve(A, g)
            cand = dict(cur)
            for k, a in var.items():
                cand[k] = se3_exp(step[6 * a:6 * a + 6]) @ cur[k]
            new = cost_of(cand)
            if new <= cost:
                lam = max(lam * 0.1, 1e-12)
                break
            lam *= 10.0
            if lam > 1e10:
                status = "diverged"
                break
        if status == "diverged":
            break
        done = cost - new <= 1e-15 * max(cost, 1e-300) or np.linalg.norm(step) < 1e-12
        cur, cost = cand, new
        costs.append(cost)
        if done:
            status = "converged"
            break
    if status == "diverged":
        raise SolverDiverged("pose-graph optimisation could not decrease the cost")
    return PGOResult(cur, costs, it, status)


def pose_graph_edges(wmap: WorldMap, loop_edges: list) -> list:
    """Essential-graph and spanning-tree edges at their current relative poses, plus loop edges."""
    pairs = set(wmap.essential_edges()) | {tuple(sorted(e)) for e in wmap.spanning_tree_of()}
    edges = []
    for a, b in sorted(pairs):
        Ta, Tb = wmap.keyframes[a].pose, wmap.keyframes[b].pose
        edges.append((a, b, Ta @ Tb.inverse()))
    for i, j, Z in loop_edges:
        edges.append((i, j, Z if isinstance(Z, Pose) else se3_exp(Z)))
    return edges


def pose_graph_optimize(wmap: WorldMap, loop_edges: list, fixed: Optional[Sequence[int]] = None) -> PGOResult:
    """Distribute loop error over the keyframe poses; the first keyframe stays fixed.

    ``loop_edges`` holds ``(i, j, xi_ij)`` with ``exp(xi_ij) ~ T_i T_j^-1``.
    The map is not modified; see :func:`apply_pose_corrections`.
    """
    if not loop_edges:
        raise ValueError("at least one loop edge is required")
    fixed = [min(wmap.keyframes)] if fixed is None else list(fixed)
    poses = {k: kf.pose for k, kf in wmap.keyframes.items()}
    return optimize_pose_graph(poses, pose_graph_edges(wmap, loop_edges), fixed)


def apply_pose_corrections(wmap: WorldMap, new_poses: dict) -> None:
    """Move keyframes to ``new_poses``; landmarks follow their originating keyframe."""
    with wmap.lock:
        moves = {k: new_poses[k].inverse() @ wmap.keyframes[k].pose for k in new_poses}
        for lm in wmap.points.values():
            M = moves.get(lm.origin_kf)
            if M is not None:
                lm.position = M.apply(lm.position)
        for lm in wmap.lines.values():
            M = moves.get(lm.origin_kf)
            if M is not None:
                lm.P, lm.Q = M.apply(lm.P), M.apply(lm.Q)
        for k, T in new_poses.items():
            wmap.keyframes[k].pose = T


def fuse_loop_maps(wmap: WorldMap, candidate: LoopCandidate, mcfg: MatchingConfig = MatchingConfig()) -> int:
    """Merge landmarks across the loop; the older landmark keeps its position.

    First the landmark pairs matched during loop verification are merged, then
    every keyframe on the current side looks for further projections of
    old-side landmarks. Returns the number of merges.
    """
    with wmap.lock:
        cur = wmap.keyframe(candidate.current)
        fused = 0
        for table, pairs, binding in ((wmap.points, candidate.point_pairs, cur.point_lm),
                                      (wmap.lines, candidate.line_pairs, cur.line_lm)):
            for idx, old_lm in pairs:
                new_lm = binding[idx]
                if new_lm is None or old_lm not in table or new_lm not in table or new_lm == old_lm:
                    continue
                keep, drop = sorted((old_lm, new_lm), key=lambda l: (table[l].origin_kf, l))
                wmap.merge_landmarks(keep, drop)
                fused += 1
        old_kfs, old_lms = wmap.local_map_of(candidate.old)
        cur_kfs, _ = wmap.local_map_of(candidate.current)
        for k in sorted(cur_kfs - old_kfs):
            kf = wmap.keyframes[k]
            seen = kf.landmark_ids()
            cand_p = sorted(l for l in old_lms if l in wmap.points and l not in seen)
            cand_l = sorted(l for l in old_lms if l in wmap.lines and l not in seen)
            obs_p = [i for i, l in enumerate(kf.point_lm) if l is not None and l not in old_lms]
            obs_l = [i for i, l in enumerate(kf.line_lm) if l is not None and l not in old_lms]
            fused += project_and_merge(wmap, k, obs_p, obs_l, cand_p, cand_l, mcfg)
        return fused
