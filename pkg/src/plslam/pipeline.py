"""End-to-end schedule: VO per frame; refinement, mapping and loop closure per keyframe."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Optional

import numpy as np

from .camera import StereoCamera
from .errors import (
    Disconnected, IllConditioned, InsufficientMatches, SingularCovariance, SolverDiverged, TrackingLost,
)
from .evaluation import TrajectorySeries
from .features import Frame
from .lie import MotionEstimate, Pose, compose_with_covariance
from .local_mapping import (
    BAConfig, LocalBAProblem, MatchingConfig, associate_unmatched, local_bundle_adjustment, match_frames,
    new_landmark_positions, prune_observations, refine_relative_pose,
)
from .loop_closure import (
    LoopCandidate, LoopConfig, SimilarityDatabase, Vocabulary, apply_pose_corrections, detect_loop_candidate,
    estimate_loop_transform, fuse_loop_maps, pose_graph_optimize, similarity_matrix,
)
from .odometry import SolverConfig, build_frame_pair, entropy, keyframe_decision, solve_motion
from .simulator import _coerce
from .world_map import KeyFrame, WorldMap

log = logging.getLogger(__name__)

MODES = ("points", "lines", "pl")


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "pl"
    entropy_ratio: float = 0.9
    max_keyframe_gap: int = 10
    tracking_lost_after: int = 5
    local_ba: bool = True
    loop_closure: bool = True
    prune_error: float = 5.0
    cull_min_obs: int = 3
    deterministic: bool = True
    solver: SolverConfig = field(default_factory=SolverConfig)
    ba: BAConfig = field(default_factory=BAConfig)
    matching: MatchingConfig = field(default_factory=MatchingConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)

    _SECTIONS = ("solver", "ba", "matching", "loop")

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def use_points(self) -> bool:
        return self.mode in ("points", "pl")

    @property
    def use_lines(self) -> bool:
        return self.mode in ("lines", "pl")

    @classmethod
    def from_mapping(cls, values: dict) -> "PipelineConfig":
        """Keys are field names or ``section.field`` for solver/ba/matching/loop."""
        base = cls()
        top, parts = {}, {s: {} for s in cls._SECTIONS}
        for key, raw in values.items():
            section, _, name = key.rpartition(".")
            if section:
                if section not in parts:
                    raise KeyError(f"unknown config section {section!r}")
                sub = getattr(base, section)
                if name not in {f.name for f in fields(sub)}:
                    raise KeyError(f"unknown config key {key!r}")
                parts[section][name] = _coerce(getattr(sub, name), raw)
            else:
                if name in cls._SECTIONS or name not in {f.name for f in fields(cls)}:
                    raise KeyError(f"unknown config key {key!r}")
                top[name] = _coerce(getattr(base, name), raw)
        for s, upd in parts.items():
            if upd:
                top[s] = replace(getattr(base, s), **upd)
        return replace(base, **top)


def parse_key_values(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"line {n}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def load_key_values(path) -> dict:
    with open(path) as fh:
        return parse_key_values(fh.read())


@dataclass
class RunReport:
    status: str
    keyframes: list  # (kf id, frame index)
    frame_poses: dict  # frame index -> world->camera pose as tracked
    events: list
    loops: list
    wmap: WorldMap
    database: Optional[SimilarityDatabase]
    frames_processed: int
    error: str = ""
    corrections: list = field(default_factory=list)  # (kf id, pose before PGO, pose after)

    @property
    def failed(self) -> bool:
        return self.status != "ok"

    def keyframe_series(self, stamps: dict) -> TrajectorySeries:
        """Keyframe poses (camera -> world) stamped with their frame times."""
        ks = [(stamps[f], self.wmap.keyframes[k].pose) for k, f in self.keyframes if k in self.wmap.keyframes]
        return TrajectorySeries.from_world_to_camera([s for s, _ in ks], [p for _, p in ks])


def _gate_frame(frame: Frame, cfg: PipelineConfig) -> Frame:
    return Frame(frame.index, list(frame.points) if cfg.use_points else [],
                 list(frame.lines) if cfg.use_lines else [], frame.timestamp)


class _Runner:
    def __init__(self, camera: StereoCamera, cfg: PipelineConfig):
        self.cam = camera
        self.cfg = cfg
        self.wmap = WorldMap(camera)
        self.db = SimilarityDatabase(Vocabulary(cfg.loop.vocabulary_size, cfg.loop.vocabulary_seed)) \
            if cfg.loop_closure else None
        self.events: list = []
        self.loops: list = []
        self.loop_edges: list = []
        self.corrections: list = []
        self.keyframes: list = []
        self.frame_poses: dict = {}

    # -- keyframes ------------------------------------------------------------

    def add_keyframe(self, frame: Frame, pose: Pose, relative: MotionEstimate) -> KeyFrame:
        cfg, wmap = self.cfg, self.wmap
        kf = KeyFrame(wmap.next_keyframe_id(), pose, frame, relative)
        refined = False
        if self.keyframes:
            prev = wmap.keyframes[self.keyframes[-1][0]]
            ref = refine_relative_pose(wmap, prev, kf, cfg.solver, cfg.matching, cfg.use_points, cfg.use_lines)
            refined = ref.refined
        pts, lns = new_landmark_positions(self.cam, kf)
        wmap.insert_keyframe(kf, pts, lns)
        self.keyframes.append((kf.id, frame.index))
        associated = associate_unmatched(wmap, kf.id, cfg.matching) if len(self.keyframes) > 1 else 0
        self.events.append({"event": "keyframe", "kf": kf.id, "frame": frame.index, "refined": refined,
                            "associated": associated})
        if cfg.local_ba and len(self.keyframes) > 1:
            self.run_local_ba(kf.id)
        if self.db is not None:
            fr = kf.frame
            self.db.add(kf.id, fr.point_desc, fr.line_desc, fr.point_uv, fr.line_pq)
            self.try_loop(kf.id)
        return kf

    def run_local_ba(self, kf_id: int) -> None:
        cfg, wmap = self.cfg, self.wmap
        local = wmap.local_map_of(kf_id)
        problem = LocalBAProblem.from_map(wmap, kf_id, local)
        res = local_bundle_adjustment(problem, cfg.ba)
        problem.write_back(wmap)
        pruned = prune_observations(wmap, problem, cfg.prune_error)
        culled = wmap.cull_landmarks(cfg.cull_min_obs, local[0])
        self.events.append({"event": "local_ba", "kf": kf_id, "status": res.status, "iterations": res.iterations,
                            "pruned": pruned, "culled": culled})

    def try_loop(self, kf_id: int) -> None:
        cfg, wmap = self.cfg, self.wmap
        cand = detect_loop_candidate(self.db, wmap, kf_id, cfg.loop, cfg.use_points, cfg.use_lines)
        if cand is None:
            return
        self.events.append({"event": "loop_candidate", "kf": kf_id, "old": cand.old, "score": round(cand.score, 9)})
        res = estimate_loop_transform(wmap, kf_id, cand.old, cfg.loop, cfg.solver, cfg.matching,
                                      cfg.use_points, cfg.use_lines, cand.score)
        if not isinstance(res, LoopCandidate):
            self.events.append({"event": "loop_rejected", "kf": kf_id, "old": cand.old, "reason": res.reason,
                                "detail": res.detail})
            return
        edge = (kf_id, cand.old, res.estimate.pose)
        edges = self.loop_edges + [edge]
        try:
            pgo = pose_graph_optimize(wmap, edges)
        except (Disconnected, SolverDiverged) as exc:
            self.events.append({"event": "loop_rejected", "kf": kf_id, "old": cand.old,
                                "reason": type(exc).__name__, "detail": str(exc)})
            return
        self.loop_edges = edges
        self.corrections.append((kf_id, wmap.keyframes[kf_id].pose, pgo.poses[kf_id]))
        apply_pose_corrections(wmap, pgo.poses)
        fused = fuse_loop_maps(wmap, res, cfg.matching)
        self.loops.append(res)
        self.events.append({"event": "loop_closed", "kf": kf_id, "old": cand.old,
                            "inlier_ratio": round(res.inlier_ratio, 9), "pgo_iterations": pgo.iterations,
                            "loop_edges": len(edges), "fused": fused})

    # -- frames ---------------------------------------------------------------

    def run(self, frames: Iterable[Frame]) -> RunReport:
        cfg = self.cfg
        prev: Optional[Frame] = None
        pose = Pose.identity()  # world -> current frame
        velocity = Pose.identity()
        chain: Optional[MotionEstimate] = None  # last keyframe -> previous frame
        h_first = None
        since_kf = 0
        failures = 0
        gap = 0  # failed frames since ``prev``
        n = 0
        last: Optional[Frame] = None
        last_pose = pose
        status, error = "ok", ""
        for raw in frames:
            frame = _gate_frame(raw, cfg)
            n += 1
            if prev is None:
                self.add_keyframe(frame, pose, MotionEstimate.zero())
                self.frame_poses[frame.index] = pose
                prev = frame
                continue
            pm, lm = match_frames(prev, frame, cfg.matching, cfg.use_points, cfg.use_lines)
            pair, _, _ = build_frame_pair(self.cam, prev, frame, pm, lm)
            try:
                init = velocity
                for _ in range(gap):
                    init = velocity @ init
                sol = solve_motion(pair, self.cam, cfg.solver, init)
                est = sol.estimate()
                h = entropy(est.covariance)
            except (InsufficientMatches, SolverDiverged, IllConditioned, SingularCovariance) as exc:
                failures += 1
                self.events.append({"event": "tracking_failure", "frame": frame.index, "reason": type(exc).__name__})
                if failures >= cfg.tracking_lost_after:
                    status = "tracking_lost"
                    error = f"motion estimation failed on {failures} consecutive frames (last: {frame.index})"
                    self.events.append({"event": "tracking_lost", "frame": frame.index})
                    break
                gap += 1
                self.frame_poses[frame.index] = velocity @ self.frame_poses[max(self.frame_poses)]
                continue
            failures = 0
            velocity = sol.pose if gap == 0 else velocity
            gap = 0
            chain = est if chain is None else compose_with_covariance(est, chain)
            if h_first is None:
                h_first = h
            since_kf += 1
            pose = sol.pose @ pose
            self.frame_poses[frame.index] = pose
            prev = frame
            last, last_pose = frame, pose
            insert = since_kf >= cfg.max_keyframe_gap
            if not insert and since_kf > 1:
                insert = keyframe_decision(entropy(chain.covariance), h_first, cfg.entropy_ratio)
            if insert:
                kf = self.add_keyframe(frame, pose, chain)
                pose = kf.pose
                self.frame_poses[frame.index] = pose
                chain, h_first, since_kf = None, None, 0
                last = None
        if status == "ok" and last is not None:
            kf = self.add_keyframe(last, last_pose, chain)
            self.frame_poses[last.index] = kf.pose
        return RunReport(status, self.keyframes, self.frame_poses, self.events, self.loops, self.wmap, self.db,
                         n, error, self.corrections)


def run_pipeline(config: PipelineConfig, frames: Iterable[Frame], camera: StereoCamera) -> RunReport:
    """Process a frame stream; tracking loss is reported in the returned status."""
    if not config.deterministic:
        log.info("concurrent schedule not available; running the deterministic schedule")
    return _Runner(camera, config).run(frames)


def run_or_raise(config: PipelineConfig, frames: Iterable[Frame], camera: StereoCamera) -> RunReport:
    rep = run_pipeline(config, frames, camera)
    if rep.status == "tracking_lost":
        raise TrackingLost(rep.error)
    return rep


def write_similarity_csv(db: SimilarityDatabase, path, use_points: bool = True, use_lines: bool = True) -> None:
    ids, M = similarity_matrix(db, use_points, use_lines)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kf"] + ids)
        for k, row in zip(ids, M):
            w.writerow([k] + [f"{v:.6f}" for v in row])


def event_summary(report: RunReport) -> dict:
    counts: dict = {}
    for e in report.events:
        counts[e["event"]] = counts.get(e["event"], 0) + 1
    return {"status": report.status, "frames": report.frames_processed, "keyframes": len(report.wmap.keyframes),
            "loops_closed": len(report.loops), "events": counts, "error": report.error}
