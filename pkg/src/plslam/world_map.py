"""Keyframes, landmarks and the covisibility / essential / spanning-tree graphs."""

from __future__ import annotations

import copy
import json
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .camera import StereoCamera
from .errors import DuplicateId, UnknownKeyFrame
from .features import Frame, LineObservation, PointObservation, descriptor_from_hex, descriptor_to_hex, hamming_matrix
from .lie import MotionEstimate, Pose

COVISIBILITY_MIN = 20
ESSENTIAL_MIN = 101  # "more than 100" shared landmarks


@dataclass(eq=False)
class KeyFrame:
    id: int
    pose: Pose  # world -> camera
    frame: Frame
    relative: MotionEstimate = field(default_factory=MotionEstimate.zero)
    point_lm: list = field(default_factory=list)
    line_lm: list = field(default_factory=list)
    point_words: dict = field(default_factory=dict)
    line_words: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.point_lm:
            self.point_lm = [None] * len(self.frame.points)
        if not self.line_lm:
            self.line_lm = [None] * len(self.frame.lines)

    @property
    def points(self) -> list[PointObservation]:
        return self.frame.points

    @property
    def lines(self) -> list[LineObservation]:
        return self.frame.lines

    def landmark_ids(self) -> set[int]:
        return {l for l in self.point_lm if l is not None} | {l for l in self.line_lm if l is not None}


@dataclass(eq=False)
class PointLandmark:
    id: int
    position: np.ndarray
    descriptor: np.ndarray
    origin_kf: int
    observations: list = field(default_factory=list)  # (kf id, obs index)


@dataclass(eq=False)
class LineLandmark:
    id: int
    P: np.ndarray
    Q: np.ndarray
    descriptor: np.ndarray
    origin_kf: int
    observations: list = field(default_factory=list)

    @property
    def direction(self) -> np.ndarray:
        d = self.Q - self.P
        return d / np.linalg.norm(d)


class WorldMap:
    """Single-writer map.

    Mutating methods must be called by the owner only; readers take
    :meth:`snapshot` copies under the same lock, so they never see a
    half-applied mutation.
    """

    def __init__(self, camera: StereoCamera):
        self.camera = camera
        self.keyframes: dict[int, KeyFrame] = {}
        self.points: dict[int, PointLandmark] = {}
        self.lines: dict[int, LineLandmark] = {}
        self.parent: dict[int, Optional[int]] = {}
        self._shared: dict[int, dict[int, int]] = defaultdict(dict)
        self._next_landmark = 0
        self.lock = threading.RLock()

    # -- basic queries ------------------------------------------------------

    def __len__(self) -> int:
        return len(self.keyframes)

    def keyframe(self, kf_id: int) -> KeyFrame:
        try:
            return self.keyframes[kf_id]
        except KeyError:
            raise UnknownKeyFrame(f"no keyframe {kf_id}") from None

    def landmark(self, lm_id: int):
        return self.points.get(lm_id) or self.lines.get(lm_id)

    def shared_count(self, a: int, b: int) -> int:
        return self._shared.get(a, {}).get(b, 0)

    def shared_counts(self, kf_id: int) -> dict[int, int]:
        return dict(self._shared.get(kf_id, {}))

    def covisible(self, kf_id: int, min_shared: int = COVISIBILITY_MIN) -> list[int]:
        return sorted(k for k, n in self._shared.get(kf_id, {}).items() if n >= min_shared)

    def covisibility_edges(self, min_shared: int = COVISIBILITY_MIN) -> set[tuple[int, int]]:
        return {(a, b) for a, nb in self._shared.items() for b, n in nb.items() if a < b and n >= min_shared}

    def essential_edges(self) -> set[tuple[int, int]]:
        return self.covisibility_edges(ESSENTIAL_MIN)

    def spanning_tree_of(self) -> set[tuple[int, int]]:
        """Edges (parent, child) of the spanning tree."""
        return {(p, c) for c, p in self.parent.items() if p is not None}

    def observers(self, lm_id: int) -> list[int]:
        lm = self.landmark(lm_id)
        return [k for k, _ in lm.observations]

    # -- observation bookkeeping ---------------------------------------------

    def _new_landmark_id(self) -> int:
        i = self._next_landmark
        self._next_landmark += 1
        return i

    def add_observation(self, lm_id: int, kf_id: int, index: int) -> None:
        lm = self.landmark(lm_id)
        kf = self.keyframes[kf_id]
        binding = kf.point_lm if isinstance(lm, PointLandmark) else kf.line_lm
        if binding[index] is not None:
            raise ValueError(f"observation {index} of keyframe {kf_id} is already bound")
        others = {k for k, _ in lm.observations}
        if kf_id in others:
            raise ValueError(f"landmark {lm_id} already observed by keyframe {kf_id}")
        for k in others:
            self._bump(kf_id, k, +1)
        lm.observations.append((kf_id, index))
        binding[index] = lm_id

    def remove_observation(self, lm_id: int, kf_id: int) -> None:
        lm = self.landmark(lm_id)
        entry = next(o for o in lm.observations if o[0] == kf_id)
        lm.observations.remove(entry)
        kf = self.keyframes[kf_id]
        binding = kf.point_lm if isinstance(lm, PointLandmark) else kf.line_lm
        binding[entry[1]] = None
        for k, _ in lm.observations:
            self._bump(kf_id, k, -1)

    def _bump(self, a: int, b: int, delta: int) -> None:
        for x, y in ((a, b), (b, a)):
            n = self._shared[x].get(y, 0) + delta
            if n:
                self._shared[x][y] = n
            else:
                self._shared[x].pop(y, None)

    def create_point(self, position: np.ndarray, kf_id: int, index: int) -> int:
        kf = self.keyframes[kf_id]
        lid = self._new_landmark_id()
        self.points[lid] = PointLandmark(lid, np.asarray(position, dtype=float).copy(),
                                         kf.points[index].descriptor, kf_id)
        self.add_observation(lid, kf_id, index)
        return lid

    def create_line(self, P: np.ndarray, Q: np.ndarray, kf_id: int, index: int) -> int:
        kf = self.keyframes[kf_id]
        lid = self._new_landmark_id()
        self.lines[lid] = LineLandmark(lid, np.asarray(P, dtype=float).copy(), np.asarray(Q, dtype=float).copy(),
                                       kf.lines[index].descriptor, kf_id)
        self.add_observation(lid, kf_id, index)
        return lid

    def remove_landmark(self, lm_id: int) -> None:
        lm = self.landmark(lm_id)
        for kf_id, _ in list(lm.observations):
            self.remove_observation(lm_id, kf_id)
        self.points.pop(lm_id, None)
        self.lines.pop(lm_id, None)

    def merge_landmarks(self, keep: int, drop: int) -> int:
        """Move ``drop``'s observations onto ``keep`` and delete ``drop``.

        Keyframes observing both keep their ``keep`` binding. Returns the
        number of observations transferred.
        """
        lk, ld = self.landmark(keep), self.landmark(drop)
        if type(lk) is not type(ld):
            raise TypeError("cannot merge a point landmark with a line landmark")
        have = {k for k, _ in lk.observations}
        moved = 0
        for kf_id, idx in list(ld.observations):
            self.remove_observation(drop, kf_id)
            if kf_id not in have:
                self.add_observation(keep, kf_id, idx)
                moved += 1
        self.points.pop(drop, None)
        self.lines.pop(drop, None)
        self.update_descriptor(keep)
        return moved

    def update_descriptor(self, lm_id: int) -> None:
        """Representative descriptor = medoid of the observed descriptors."""
        lm = self.landmark(lm_id)
        if not lm.observations:
            return
        if isinstance(lm, PointLandmark):
            descs = [self.keyframes[k].points[i].descriptor for k, i in lm.observations]
        else:
            descs = [self.keyframes[k].lines[i].descriptor for k, i in lm.observations]
        D = hamming_matrix(descs, descs)
        lm.descriptor = np.asarray(descs[int(np.argmin(D.sum(axis=1)))], dtype=np.uint8)

    # -- keyframes ------------------------------------------------------------

    def next_keyframe_id(self) -> int:
        return max(self.keyframes) + 1 if self.keyframes else 0

    def insert_keyframe(self, kf: KeyFrame, new_points: Optional[dict] = None,
                        new_lines: Optional[dict] = None) -> int:
        """Store ``kf`` and attach its observations.

        ``kf.point_lm`` / ``kf.line_lm`` name existing landmarks to extend;
        ``new_points`` maps observation index -> world position and
        ``new_lines`` maps index -> (P, Q) for landmarks to create. The
        spanning-tree parent is the most covisible existing keyframe (lowest id
        on ties), or the latest keyframe when nothing is shared.
        """
        with self.lock:
            if kf.id in self.keyframes:
                raise DuplicateId(f"keyframe {kf.id} already in the map")
            prev = max(self.keyframes) if self.keyframes else None
            wanted_p, wanted_l = list(kf.point_lm), list(kf.line_lm)
            kf.point_lm = [None] * len(kf.points)
            kf.line_lm = [None] * len(kf.lines)
            self.keyframes[kf.id] = kf
            for idx, lm in enumerate(wanted_p):
                if lm is not None and lm in self.points:
                    self.add_observation(lm, kf.id, idx)
                    self.update_descriptor(lm)
            for idx, lm in enumerate(wanted_l):
                if lm is not None and lm in self.lines:
                    self.add_observation(lm, kf.id, idx)
                    self.update_descriptor(lm)
            for idx, X in sorted((new_points or {}).items()):
                if kf.point_lm[idx] is None:
                    self.create_point(X, kf.id, idx)
            for idx, (P, Q) in sorted((new_lines or {}).items()):
                if kf.line_lm[idx] is None:
                    self.create_line(P, Q, kf.id, idx)
            counts = self._shared.get(kf.id, {})
            if prev is None:
                self.parent[kf.id] = None
            elif counts:
                best = max(counts.values())
                self.parent[kf.id] = min(k for k, n in counts.items() if n == best)
            else:
                self.parent[kf.id] = prev
            return kf.id

    def local_map_of(self, kf_id: int, min_shared: int = COVISIBILITY_MIN) -> tuple[set[int], set[int]]:
        """Query keyframe plus its covisibility neighbours, and every landmark they observe."""
        self.keyframe(kf_id)
        kfs = {kf_id, *self.covisible(kf_id, min_shared)}
        lms: set[int] = set()
        for k in kfs:
            lms |= self.keyframes[k].landmark_ids()
        return kfs, lms

    def cull_landmarks(self, min_obs: int = 3, local_kfs: Optional[Iterable[int]] = None) -> int:
        """Remove landmarks with fewer than ``min_obs`` observations.

        When ``local_kfs`` is given, only landmarks whose originating keyframe
        has left that window are considered.
        """
        with self.lock:
            window = None if local_kfs is None else set(local_kfs)
            doomed = []
            for table in (self.points, self.lines):
                for lid, lm in table.items():
                    if len(lm.observations) >= min_obs:
                        continue
                    if window is not None and lm.origin_kf in window:
                        continue
                    doomed.append(lid)
            for lid in doomed:
                self.remove_landmark(lid)
            return len(doomed)

    def recompute_shared(self) -> dict[int, dict[int, int]]:
        """Brute-force shared-landmark counts (for verification)."""
        out: dict[int, dict[int, int]] = defaultdict(dict)
        for table in (self.points, self.lines):
            for lm in table.values():
                ks = sorted({k for k, _ in lm.observations})
                for i, a in enumerate(ks):
                    for b in ks[i + 1:]:
                        out[a][b] = out[a].get(b, 0) + 1
                        out[b][a] = out[b].get(a, 0) + 1
        return out

    def check_integrity(self) -> None:
        """Raise AssertionError if bindings and observation lists disagree."""
        for table, attr in ((self.points, "point_lm"), (self.lines, "line_lm")):
            for lid, lm in table.items():
                assert len({k for k, _ in lm.observations}) == len(lm.observations)
                for k, i in lm.observations:
                    assert getattr(self.keyframes[k], attr)[i] == lid, (lid, k, i)
        for kf in self.keyframes.values():
            for lid, i in ((l, i) for i, l in enumerate(kf.point_lm) if l is not None):
                assert (kf.id, i) in self.points[lid].observations
            for lid, i in ((l, i) for i, l in enumerate(kf.line_lm) if l is not None):
                assert (kf.id, i) in self.lines[lid].observations
        shared = {a: {b: n for b, n in nb.items() if n} for a, nb in self._shared.items()}
        shared = {a: nb for a, nb in shared.items() if nb}
        assert shared == dict(self.recompute_shared())
        ids = sorted(self.keyframes)
        assert len(self.spanning_tree_of()) == max(len(ids) - 1, 0)

    def snapshot(self) -> "WorldMap":
        with self.lock:
            lock, self.lock = self.lock, None
            try:
                clone = copy.deepcopy(self)
            finally:
                self.lock = lock
            clone.lock = threading.RLock()
            return clone

    # -- serialisation --------------------------------------------------------

    def to_json(self) -> dict:
        def pose(p: Pose) -> dict:
            return {"R": np.round(p.R, 12).tolist(), "t": np.round(p.t, 12).tolist()}

        kfs = []
        for kf in sorted(self.keyframes.values(), key=lambda k: k.id):
            kfs.append({
                "id": kf.id,
                "frame": kf.frame.index,
                "pose": pose(kf.pose),
                "parent": self.parent.get(kf.id),
                "relative": {"mean": kf.relative.mean.tolist(), "covariance": kf.relative.covariance.tolist()},
                "points": [{"u": o.uL, "v": o.vL, "d": o.disparity, "desc": descriptor_to_hex(o.descriptor),
                            "landmark": kf.point_lm[i]} for i, o in enumerate(kf.points)],
                "lines": [{"px": float(o.p[0]), "py": float(o.p[1]), "qx": float(o.q[0]), "qy": float(o.q[1]),
                           "dp": o.disp_p, "dq": o.disp_q, "desc": descriptor_to_hex(o.descriptor),
                           "landmark": kf.line_lm[i]} for i, o in enumerate(kf.lines)],
            })
        pts = [{"id": lm.id, "position": lm.position.tolist(), "descriptor": descriptor_to_hex(lm.descriptor),
                "origin": lm.origin_kf, "observations": [list(o) for o in lm.observations]}
               for lm in sorted(self.points.values(), key=lambda l: l.id)]
        lns = [{"id": lm.id, "P": lm.P.tolist(), "Q": lm.Q.tolist(), "direction": lm.direction.tolist(),
                "descriptor": descriptor_to_hex(lm.descriptor), "origin": lm.origin_kf,
                "observations": [list(o) for o in lm.observations]}
               for lm in sorted(self.lines.values(), key=lambda l: l.id)]
        return {
            "camera": self.camera.to_dict(),
            "keyframes": kfs,
            "points": pts,
            "lines": lns,
            "covisibility": sorted([a, b, self.shared_count(a, b)] for a, b in self.covisibility_edges()),
            "essential": sorted([a, b] for a, b in self.essential_edges()),
            "spanning_tree": sorted([p, c] for p, c in self.spanning_tree_of()),
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, data: dict) -> "WorldMap":
        m = cls(StereoCamera(**data["camera"]))
        for k in data["keyframes"]:
            points = [PointObservation(o["u"], o["v"], o["d"], descriptor_from_hex(o["desc"])) for o in k["points"]]
            lines = [LineObservation([o["px"], o["py"]], [o["qx"], o["qy"]], o["dp"], o["dq"],
                                     descriptor_from_hex(o["desc"])) for o in k["lines"]]
            rel = MotionEstimate(k["relative"]["mean"], k["relative"]["covariance"])
            kf = KeyFrame(k["id"], Pose(k["pose"]["R"], k["pose"]["t"]), Frame(k["frame"], points, lines), rel)
            m.keyframes[kf.id] = kf
            m.parent[kf.id] = k["parent"]
        for p in data["points"]:
            m.points[p["id"]] = PointLandmark(p["id"], np.array(p["position"]), descriptor_from_hex(p["descriptor"]),
                                              p["origin"])
        for l in data["lines"]:
            m.lines[l["id"]] = LineLandmark(l["id"], np.array(l["P"]), np.array(l["Q"]),
                                            descriptor_from_hex(l["descriptor"]), l["origin"])
        for table, src in ((m.points, data["points"]), (m.lines, data["lines"])):
            for rec in src:
                for kf_id, idx in rec["observations"]:
                    m.add_observation(rec["id"], kf_id, idx)
        ids = [p["id"] for p in data["points"]] + [l["id"] for l in data["lines"]]
        m._next_landmark = max(ids) + 1 if ids else 0
        return m

    @classmethod
    def load(cls, path) -> "WorldMap":
        with open(path) as fh:
            return cls.from_json(json.load(fh))
