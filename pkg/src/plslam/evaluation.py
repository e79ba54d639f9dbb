"""Relative trajectory errors and KITTI-style subsequence drift."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import EmptySeries, NoAssociation, TrajectoryTooShort
from .lie import Pose, rotation_angle, se3_log

DEFAULT_LENGTHS = (5.0, 10.0, 20.0)


@dataclass
class TrajectorySeries:
    """Timestamped camera-to-world poses (the TUM convention)."""

    stamps: np.ndarray
    poses: list

    def __post_init__(self):
        self.stamps = np.asarray(self.stamps, dtype=float).reshape(-1)
        if len(self.stamps) != len(self.poses):
            raise ValueError("stamps and poses differ in length")
        if np.any(np.diff(self.stamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    @classmethod
    def from_world_to_camera(cls, stamps, poses_cw) -> "TrajectorySeries":
        return cls(stamps, [p.inverse() for p in poses_cw])

    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses]).reshape(-1, 3)


def write_tum(series: TrajectorySeries, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_tum(series))


def format_tum(series: TrajectorySeries) -> str:
    rows = []
    for s, p in zip(series.stamps, series.poses):
        q = Rotation.from_matrix(p.R).as_quat()  # x, y, z, w
        if q[3] < 0:
            q = -q
        rows.append(" ".join(f"{v:.9f}" for v in (s, *p.t, *q)))
    return "\n".join(rows) + ("\n" if rows else "")


def read_tum(path) -> TrajectorySeries:
    stamps, poses = [], []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = line.split()
            if len(vals) != 8:
                raise ValueError(f"line {n}: expected 8 values, got {len(vals)}")
            v = [float(x) for x in vals]
            stamps.append(v[0])
            poses.append(Pose(Rotation.from_quat(v[4:8]).as_matrix(), np.array(v[1:4])))
    return TrajectorySeries(stamps, poses)


def associate(gt: TrajectorySeries, est: TrajectorySeries, tolerance: float = 0.01) -> list[tuple[int, int]]:
    """Index pairs (gt, est) matched by nearest timestamp within ``tolerance`` seconds."""
    if len(gt) == 0 or len(est) == 0:
        return []
    pos = np.searchsorted(gt.stamps, est.stamps)
    pairs = []
    used = set()
    for j, (s, k) in enumerate(zip(est.stamps, pos)):
        opts = [i for i in (k - 1, k) if 0 <= i < len(gt)]
        i = min(opts, key=lambda i: abs(gt.stamps[i] - s))
        if abs(gt.stamps[i] - s) <= tolerance and i not in used:
            used.add(i)
            pairs.append((i, j))
    return pairs


def _associated(gt, est, tolerance):
    pairs = associate(gt, est, tolerance)
    if len(pairs) < 2:
        raise NoAssociation(f"only {len(pairs)} poses associate within {tolerance} s")
    return [gt.poses[i] for i, _ in pairs], [est.poses[j] for _, j in pairs]


def relative_pose_errors(gt: TrajectorySeries, est: TrajectorySeries, tolerance: float = 0.01):
    """Per consecutive pair: norms of the translation and rotation parts of
    ``log((G_i^-1 G_j)^-1 (E_i^-1 E_j))``. Returns two arrays (m, rad)."""
    G, E = _associated(gt, est, tolerance)
    te, re = [], []
    for k in range(len(G) - 1):
        rel_g = G[k].inverse() @ G[k + 1]
        rel_e = E[k].inverse() @ E[k + 1]
        xi = se3_log(rel_g.inverse() @ rel_e)
        te.append(np.linalg.norm(xi[:3]))
        re.append(np.linalg.norm(xi[3:]))
    return np.array(te), np.array(re)


def rmse(errors: Sequence[float]) -> float:
    e = np.asarray(errors, dtype=float).reshape(-1)
    if e.size == 0:
        raise EmptySeries("rmse of an empty series")
    return float(np.sqrt(np.mean(e ** 2)))


def kitti_metrics(gt: TrajectorySeries, est: TrajectorySeries,
                  subsequence_lengths: Sequence[float] = DEFAULT_LENGTHS, tolerance: float = 0.01):
    """Mean subsequence drift as (t_rel %, R_rel deg/100 m).

    For every start index and length L the subsequence ends at the first pose
    whose ground-truth path distance from the start is at least L. Errors are
    divided by that travelled distance.
    """
    G, E = _associated(gt, est, tolerance)
    pos = np.array([p.t for p in G])
    dist = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pos, axis=0), axis=1))])
    if dist[-1] < max(subsequence_lengths):
        raise TrajectoryTooShort(f"path length {dist[-1]:.3f} m < {max(subsequence_lengths)} m")
    t_err, r_err = [], []
    for i in range(len(G)):
        for L in subsequence_lengths:
            j = int(np.searchsorted(dist, dist[i] + L - 1e-12))
            if j >= len(G):
                continue
            d = dist[j] - dist[i]
            err = (E[i].inverse() @ E[j]).inverse() @ (G[i].inverse() @ G[j])
            t_err.append(np.linalg.norm(err.t) / d)
            r_err.append(rotation_angle(err.R) / d)
    if not t_err:
        raise TrajectoryTooShort("no complete subsequence")
    return 100.0 * float(np.mean(t_err)), math.degrees(float(np.mean(r_err))) * 100.0


def metrics_report(gt: TrajectorySeries, est: TrajectorySeries,
                   lengths: Sequence[float] = DEFAULT_LENGTHS, tolerance: float = 0.01) -> dict:
    te, re = relative_pose_errors(gt, est, tolerance)
    out = {"pairs": int(te.size), "rmse_translation_m": rmse(te), "rmse_rotation_rad": rmse(re),
           "lengths_m": [float(x) for x in lengths]}
    try:
        t_rel, r_rel = kitti_metrics(gt, est, lengths, tolerance)
        out.update(t_rel_percent=t_rel, r_rel_deg_per_100m=r_rel)
    except TrajectoryTooShort as exc:
        out.update(t_rel_percent=None, r_rel_deg_per_100m=None, note=str(exc))
    return out


def write_metrics(metrics: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=1, sort_keys=True)
        fh.write("\n")
