"""Observation types, binary descriptors and the matching filters.

Descriptors are 256-bit strings stored as 32 ``uint8`` values. Every
observation carries one; the matcher only ever looks at Hamming distances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import DegenerateSegment

DESCRIPTOR_BYTES = 32
DESCRIPTOR_BITS = 8 * DESCRIPTOR_BYTES

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int32)


def descriptor_from_hex(text: str) -> np.ndarray:
    raw = bytes.fromhex(text)
    if len(raw) != DESCRIPTOR_BYTES:
        raise ValueError(f"descriptor must be {DESCRIPTOR_BYTES} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).copy()


def descriptor_to_hex(desc: np.ndarray) -> str:
    return np.asarray(desc, dtype=np.uint8).tobytes().hex()


def as_descriptor_array(descs) -> np.ndarray:
    arr = np.asarray(descs, dtype=np.uint8)
    if arr.size == 0:
        return np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8)
    return arr.reshape(-1, DESCRIPTOR_BYTES)


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    return int(_POPCOUNT[np.bitwise_xor(a, b)].sum())


def hamming_matrix(a, b) -> np.ndarray:
    """Pairwise Hamming distances between two descriptor stacks."""
    A = as_descriptor_array(a)
    B = as_descriptor_array(b)
    if len(A) == 0 or len(B) == 0:
        return np.zeros((len(A), len(B)), dtype=np.int32)
    return _POPCOUNT[np.bitwise_xor(A[:, None, :], B[None, :, :])].sum(axis=2)


@dataclass(frozen=True, eq=False)
class PointObservation:
    uL: float
    vL: float
    disparity: float
    descriptor: np.ndarray
    landmark_hint: Optional[int] = None

    @property
    def uv(self) -> np.ndarray:
        return np.array([self.uL, self.vL])


@dataclass(frozen=True, eq=False)
class LineObservation:
    p: np.ndarray
    q: np.ndarray
    disp_p: float
    disp_q: float
    descriptor: np.ndarray
    landmark_hint: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float).reshape(2))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float).reshape(2))

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.q - self.p))

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.p + self.q)


class Match(NamedTuple):
    index_a: int
    index_b: int
    distance: int


MatchSet = list[Match]


@dataclass(eq=False)
class Frame:
    """All observations of one stereo frame, with array views for vectorised use."""

    index: int
    points: list[PointObservation] = field(default_factory=list)
    lines: list[LineObservation] = field(default_factory=list)
    timestamp: Optional[float] = None

    @property
    def stamp(self) -> float:
        return float(self.index) if self.timestamp is None else self.timestamp

    @cached_property
    def point_uv(self) -> np.ndarray:
        return np.array([[o.uL, o.vL] for o in self.points], dtype=float).reshape(-1, 2)

    @cached_property
    def point_disp(self) -> np.ndarray:
        return np.array([o.disparity for o in self.points], dtype=float)

    @cached_property
    def point_desc(self) -> np.ndarray:
        return as_descriptor_array([o.descriptor for o in self.points])

    @cached_property
    def line_pq(self) -> np.ndarray:
        """(N, 4): px, py, qx, qy."""
        return np.array([[*o.p, *o.q] for o in self.lines], dtype=float).reshape(-1, 4)

    @cached_property
    def line_disp(self) -> np.ndarray:
        return np.array([[o.disp_p, o.disp_q] for o in self.lines], dtype=float).reshape(-1, 2)

    @cached_property
    def line_desc(self) -> np.ndarray:
        return as_descriptor_array([o.descriptor for o in self.lines])

    @cached_property
    def line_coeffs(self) -> np.ndarray:
        return line_coeffs_many(self.line_pq[:, :2], self.line_pq[:, 2:])


def match_descriptors(a, b, ratio: float = 2.0, max_distance: Optional[int] = None) -> MatchSet:
    """Mutual-best matches that also pass the ratio test on both sides.

    A pair (i, j) survives when j is i's nearest neighbour and vice versa, and
    ``best * ratio < second_best`` holds in row i and in column j.
    ``max_distance`` optionally rejects pairs whose distance exceeds it.
    """
    D = hamming_matrix(a, b)
    if D.size == 0:
        return []
    inf = np.iinfo(np.int32).max // 4
    best_b = np.argmin(D, axis=1)
    best_a = np.argmin(D, axis=0)
    row_sorted = np.sort(D, axis=1)
    col_sorted = np.sort(D, axis=0)
    row_second = row_sorted[:, 1] if D.shape[1] > 1 else np.full(D.shape[0], inf)
    col_second = col_sorted[1, :] if D.shape[0] > 1 else np.full(D.shape[1], inf)
    out: MatchSet = []
    for i, j in enumerate(best_b):
        if best_a[j] != i:
            continue
        d = int(D[i, j])
        if not (d * ratio < row_second[i] and d * ratio < col_second[j]):
            continue
        if max_distance is not None and d > max_distance:
            continue
        out.append(Match(i, int(j), d))
    return out


def _orientation(p: np.ndarray, q: np.ndarray) -> float:
    d = q - p
    return float(np.arctan2(d[1], d[0]))


def line_pair_consistent(a: LineObservation, b: LineObservation, angle_tol: float,
                         length_tol: float, disp_tol: float) -> bool:
    """The geometric predicate behind :func:`filter_line_matches`."""
    da = a.q - a.p
    db = b.q - b.p
    la, lb = float(np.linalg.norm(da)), float(np.linalg.norm(db))
    if la == 0.0 or lb == 0.0:
        return False
    cosang = abs(float(da @ db)) / (la * lb)
    if np.arccos(min(1.0, cosang)) > angle_tol:
        return False
    r = lb / la
    if r < 1.0 - length_tol or r > 1.0 / (1.0 - length_tol):
        return False
    if da @ db >= 0:
        dp, dq = b.disp_p, b.disp_q
    else:
        dp, dq = b.disp_q, b.disp_p
    return max(abs(a.disp_p - dp), abs(a.disp_q - dq)) <= disp_tol


def filter_line_matches(matches: MatchSet, obs_a: Sequence[LineObservation],
                        obs_b: Sequence[LineObservation], angle_tol: float = np.deg2rad(10.0),
                        length_tol: float = 0.25, disp_tol: float = 1.5) -> MatchSet:
    """Drop line matches whose orientation, length or endpoint disparities disagree."""
    return [m for m in matches
            if line_pair_consistent(obs_a[m.index_a], obs_b[m.index_b], angle_tol, length_tol, disp_tol)]


def infinite_line_coeffs(p, q) -> np.ndarray:
    """Homogeneous line through p and q, scaled so that ``l . (x, y, 1)`` is a pixel distance."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.array_equal(p, q):
        raise DegenerateSegment("segment endpoints coincide")
    l = np.cross(np.append(p, 1.0), np.append(q, 1.0))
    return l / np.hypot(l[0], l[1])


def line_coeffs_many(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float).reshape(-1, 2)
    q = np.asarray(q, dtype=float).reshape(-1, 2)
    ph = np.hstack([p, np.ones((len(p), 1))])
    qh = np.hstack([q, np.ones((len(q), 1))])
    l = np.cross(ph, qh)
    n = np.hypot(l[:, 0], l[:, 1])
    if np.any(n == 0):
        raise DegenerateSegment("segment endpoints coincide")
    return l / n[:, None]
