"""Deterministic synthetic stereo scenes.

Randomness comes exclusively from NumPy's PCG64 bit generator seeded through
``SeedSequence``; a (spec, seed) pair therefore reproduces the same world and
the same observation stream on every platform NumPy supports.

World frame = camera frame of the first trajectory pose: x right, y down,
z forward. Trajectories stay in the y = 0 plane.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .camera import StereoCamera
from .features import DESCRIPTOR_BYTES, Frame, LineObservation, PointObservation
from .lie import Pose, inverse

SHAPES = ("line", "circle-loop", "figure-eight")
MIN_LINE_PIXELS = 8.0


@dataclass(frozen=True)
class TrajectorySpec:
    shape: str = "line"
    length: float = 10.0
    frames: int = 50

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown trajectory shape {self.shape!r}")
        if self.frames < 2:
            raise ValueError("a trajectory needs at least 2 frames")
        if not self.length > 0:
            raise ValueError("length must be positive")

    @property
    def speed(self) -> float:
        """Path length travelled per frame (meters)."""
        return self.length / (self.frames - 1)


@dataclass(frozen=True)
class NoiseModel:
    pixel_sigma: float = 0.5
    truncation: float = 0.3
    bit_flip: float = 0.05
    outlier_rate: float = 0.0

    def __post_init__(self):
        for name in ("truncation", "bit_flip", "outlier_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.pixel_sigma < 0:
            raise ValueError("pixel_sigma must be non-negative")


@dataclass(frozen=True)
class WorldSpec:
    n_points: int = 800
    n_lines: int = 250
    margin: float = 4.0
    height: float = 4.0
    min_segment: float = 1.0
    max_segment: float = 2.0


@dataclass(frozen=True)
class SimSpec:
    """Everything needed to regenerate a synthetic run."""

    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    world: WorldSpec = field(default_factory=WorldSpec)
    noise: NoiseModel = field(default_factory=NoiseModel)
    camera: StereoCamera = field(default_factory=lambda: StereoCamera(400.0, 400.0, 320.0, 240.0, 0.5, 640, 480))
    max_points: int = 0
    max_lines: int = 0
    max_range: float = 20.0
    seed: int = 0

    _SECTIONS = {"trajectory": TrajectorySpec, "world": WorldSpec, "noise": NoiseModel,
                 "camera": StereoCamera}

    @classmethod
    def from_mapping(cls, values: dict) -> "SimSpec":
        """Build from flat keys; nested fields may be written ``section.key``.

        Unprefixed keys are looked up in every section, then at top level.
        """
        parts: dict[str, dict] = {k: {} for k in cls._SECTIONS}
        top: dict = {}
        top_names = {f.name for f in fields(cls)} - set(cls._SECTIONS)
        for key, raw in values.items():
            section, _, name = key.rpartition(".")
            targets = [section] if section else [s for s, t in cls._SECTIONS.items()
                                                  if name in {f.name for f in fields(t)}]
            if section and section not in cls._SECTIONS:
                raise KeyError(f"unknown section {section!r}")
            if not targets:
                if name not in top_names:
                    raise KeyError(f"unknown simulation key {key!r}")
                top[name] = raw
                continue
            for s in targets:
                parts[s][name] = raw
        base = cls()
        kw = {}
        for s, typ in cls._SECTIONS.items():
            cur = getattr(base, s)
            upd = {k: _coerce(getattr(cur, k), v) for k, v in parts[s].items()}
            kw[s] = replace(cur, **upd) if upd else cur
        for k, v in top.items():
            kw[k] = _coerce(getattr(base, k), v)
        return cls(**kw)

    def to_mapping(self) -> dict:
        out = {}
        for s in self._SECTIONS:
            for k, v in asdict(getattr(self, s)).items():
                out[f"{s}.{k}"] = v
        for f in fields(self):
            if f.name not in self._SECTIONS:
                out[f.name] = getattr(self, f.name)
        return out


def _coerce(default, raw):
    if isinstance(raw, str):
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    return type(default)(raw) if default is not None else raw


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    points: np.ndarray
    point_signatures: np.ndarray
    seg_P: np.ndarray
    seg_Q: np.ndarray
    line_signatures: np.ndarray
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    seed: int

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def n_lines(self) -> int:
        return len(self.seg_P)


def _rng(*keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in keys])))


# -- trajectories ------------------------------------------------------------


def _rot_y(phi: float) -> np.ndarray:
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _planar_state(spec: TrajectorySpec, s: float) -> tuple[np.ndarray, float]:
    """Position (x, z) and heading after travelling arc length ``s``."""
    if spec.shape == "line":
        return np.array([0.0, s]), 0.0
    if spec.shape == "circle-loop":
        r = spec.length / (2.0 * np.pi)
        phi = s / r
        return np.array([r - r * np.cos(phi), r * np.sin(phi)]), phi
    # figure-eight: a right-hand circle followed by a left-hand circle, both through the origin
    r = spec.length / (4.0 * np.pi)
    half = spec.length / 2.0
    if s <= half:
        phi = s / r
        return np.array([r - r * np.cos(phi), r * np.sin(phi)]), phi
    phi = (s - half) / r
    return np.array([-r + r * np.cos(phi), r * np.sin(phi)]), -phi


def generate_trajectory(spec: TrajectorySpec, seed: int = 0) -> list[Pose]:
    """Camera poses (world -> camera) along the shape; the first pose is the identity.

    The heading is tangent to the path. ``seed`` is accepted for interface
    symmetry; trajectories are fully determined by the shape.
    """
    del seed
    poses = []
    for k in range(spec.frames):
        s = k * spec.speed
        xz, phi = _planar_state(spec, s)
        R_wc = _rot_y(phi)
        c_w = np.array([xz[0], 0.0, xz[1]])
        poses.append(inverse(Pose(R_wc, c_w)))
    return poses


def trajectory_positions(poses: list[Pose]) -> np.ndarray:
    return np.array([inverse(p).t for p in poses])


# -- world -------------------------------------------------------------------


def _walls(lo: np.ndarray, hi: np.ndarray) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Vertical walls as (origin, u-axis extent, v-axis extent) rectangles."""
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    dy = np.array([0.0, y1 - y0, 0.0])
    return [
        (np.array([x0, y0, z0]), np.array([x1 - x0, 0.0, 0.0]), dy),
        (np.array([x0, y0, z1]), np.array([x1 - x0, 0.0, 0.0]), dy),
        (np.array([x0, y0, z0]), np.array([0.0, 0.0, z1 - z0]), dy),
        (np.array([x1, y0, z0]), np.array([0.0, 0.0, z1 - z0]), dy),
    ]


def build_world(spec: SimSpec, seed: int | None = None) -> SyntheticWorld:
    """Points scattered on the walls of a box around the trajectory, segments on the same walls.

    Segments are axis-aligned on each wall (horizontal or vertical), plus the
    four vertical box corners, which keeps the scene structured.
    """
    seed = spec.seed if seed is None else seed
    rng = _rng(seed, 1)
    poses = generate_trajectory(spec.trajectory)
    pos = trajectory_positions(poses)
    w = spec.world
    lo = np.array([pos[:, 0].min() - w.margin, -w.height / 2.0, pos[:, 2].min() - w.margin])
    hi = np.array([pos[:, 0].max() + w.margin, w.height / 2.0, pos[:, 2].max() + w.margin])
    walls = _walls(lo, hi)
    areas = np.array([np.linalg.norm(u) * np.linalg.norm(v) for _, u, v in walls])
    prob = areas / areas.sum()

    wall_idx = rng.choice(len(walls), size=w.n_points, p=prob)
    ab = rng.uniform(0.0, 1.0, size=(w.n_points, 2))
    points = np.array([walls[k][0] + a * walls[k][1] + b * walls[k][2]
                       for k, (a, b) in zip(wall_idx, ab)]).reshape(-1, 3)

    P, Q = [], []
    corners = [(lo[0], lo[2]), (lo[0], hi[2]), (hi[0], lo[2]), (hi[0], hi[2])]
    n_corner = min(w.n_lines, 4)
    for x, z in corners[:n_corner]:
        P.append([x, lo[1] + 0.1 * w.height, z])
        Q.append([x, hi[1] - 0.1 * w.height, z])
    n_rest = w.n_lines - n_corner
    seg_wall = rng.choice(len(walls), size=n_rest, p=prob)
    vertical = rng.uniform(size=n_rest) < 0.5
    seg_len = rng.uniform(w.min_segment, w.max_segment, size=n_rest)
    centers = rng.uniform(0.0, 1.0, size=(n_rest, 2))
    for k, vert, L, (a, b) in zip(seg_wall, vertical, seg_len, centers):
        o, u, v = walls[k]
        lu, lv = np.linalg.norm(u), np.linalg.norm(v)
        if vert:
            L = min(L, 0.9 * lv)
            b = np.clip(b, 0.5 * L / lv, 1.0 - 0.5 * L / lv)
            c = o + a * u + b * v
            d = v / lv
        else:
            L = min(L, 0.9 * lu)
            a = np.clip(a, 0.5 * L / lu, 1.0 - 0.5 * L / lu)
            c = o + a * u + b * v
            d = u / lu
        P.append(c - 0.5 * L * d)
        Q.append(c + 0.5 * L * d)

    point_sigs = rng.integers(0, 256, size=(w.n_points, DESCRIPTOR_BYTES), dtype=np.uint8)
    line_sigs = rng.integers(0, 256, size=(w.n_lines, DESCRIPTOR_BYTES), dtype=np.uint8)
    return SyntheticWorld(points, point_sigs, np.array(P, dtype=float).reshape(-1, 3),
                          np.array(Q, dtype=float).reshape(-1, 3), line_sigs, lo, hi, seed)


# -- rendering ---------------------------------------------------------------


def _visible(cam: StereoCamera, Xc: np.ndarray, max_range: float) -> np.ndarray:
    z = Xc[:, 2]
    ok = (z > 0.1) & (np.linalg.norm(Xc, axis=1) <= max_range)
    zs = np.where(ok, z, 1.0)
    u = cam.fx * Xc[:, 0] / zs + cam.cx
    v = cam.fy * Xc[:, 1] / zs + cam.cy
    d = cam.baseline * cam.fx / zs
    ok &= (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height) & (u - d >= 0)
    return ok


def _flip(rng: np.random.Generator, sig: np.ndarray, p: float) -> np.ndarray:
    if p <= 0:
        return sig.copy()
    bits = np.unpackbits(sig, axis=-1)
    mask = rng.uniform(size=bits.shape) < p
    return np.packbits(bits ^ mask.astype(np.uint8), axis=-1)


def _stereo_measure(rng, cam: StereoCamera, Xc: np.ndarray, sigma: float) -> np.ndarray:
    """Noisy (uL, vL, disparity) from camera-frame points."""
    u = cam.fx * Xc[:, 0] / Xc[:, 2] + cam.cx
    v = cam.fy * Xc[:, 1] / Xc[:, 2] + cam.cy
    d = cam.baseline * cam.fx / Xc[:, 2]
    if sigma > 0:
        nl = rng.normal(0.0, sigma, size=(len(u), 2))
        nr = rng.normal(0.0, sigma, size=len(u))
        u = u + nl[:, 0]
        v = v + nl[:, 1]
        d = d + nl[:, 0] - nr
    return np.stack([u, v, d], axis=1)


def render_observations(world: SyntheticWorld, pose: Pose, cam: StereoCamera, noise: NoiseModel,
                        seed: int, index: int = 0, max_points: int = 0, max_lines: int = 0,
                        max_range: float = 20.0) -> Frame:
    """Observe the world from ``pose`` (world -> camera).

    Feature caps keep the landmarks with the lowest ids so the selection is
    stable from frame to frame.
    """
    rng = _rng(world.seed, seed, index, 2)
    Xc = pose.apply(world.points)
    pidx = np.flatnonzero(_visible(cam, Xc, max_range))
    if max_points > 0:
        pidx = pidx[:max_points]
    Pc = pose.apply(world.seg_P)
    Qc = pose.apply(world.seg_Q)
    lidx = np.flatnonzero(_visible(cam, Pc, max_range) & _visible(cam, Qc, max_range))
    if max_lines > 0:
        lidx = lidx[:max_lines]

    meas = _stereo_measure(rng, cam, Xc[pidx], noise.pixel_sigma)
    point_desc = _flip(rng, world.point_signatures[pidx], noise.bit_flip)
    points = [PointObservation(float(m[0]), float(m[1]), float(m[2]), point_desc[k], int(j))
              for k, (j, m) in enumerate(zip(pidx, meas))]

    trunc = rng.uniform(0.0, noise.truncation, size=(len(lidx), 2)) if noise.truncation > 0 \
        else np.zeros((len(lidx), 2))
    P3, Q3 = Pc[lidx], Qc[lidx]
    D = Q3 - P3
    Pt = P3 + trunc[:, :1] * D
    Qt = Q3 - trunc[:, 1:] * D
    mp = _stereo_measure(rng, cam, Pt, noise.pixel_sigma)
    mq = _stereo_measure(rng, cam, Qt, noise.pixel_sigma)
    line_desc = _flip(rng, world.line_signatures[lidx], noise.bit_flip)
    long_enough = np.linalg.norm(mq[:, :2] - mp[:, :2], axis=1) >= MIN_LINE_PIXELS
    lines = [LineObservation(mp[k, :2], mq[k, :2], float(mp[k, 2]), float(mq[k, 2]), line_desc[k], int(j))
             for k, j in enumerate(lidx) if long_enough[k]]

    n_out_p = int(round(noise.outlier_rate * len(points)))
    n_out_l = int(round(noise.outlier_rate * len(lines)))
    for _ in range(n_out_p):
        u, v = rng.uniform(0, cam.width), rng.uniform(0, cam.height)
        d = rng.uniform(2.0, 40.0)
        desc = rng.integers(0, 256, size=DESCRIPTOR_BYTES, dtype=np.uint8)
        points.append(PointObservation(float(u), float(v), float(d), desc, None))
    for _ in range(n_out_l):
        p = rng.uniform([0, 0], [cam.width, cam.height])
        ang = rng.uniform(0, np.pi)
        L = rng.uniform(20.0, 120.0)
        q = p + L * np.array([np.cos(ang), np.sin(ang)])
        desc = rng.integers(0, 256, size=DESCRIPTOR_BYTES, dtype=np.uint8)
        lines.append(LineObservation(p, q, float(rng.uniform(2, 40)), float(rng.uniform(2, 40)), desc, None))
    return Frame(index, points, lines)


def simulate(spec: SimSpec) -> tuple[list[Pose], list[Frame], SyntheticWorld]:
    """Ground-truth poses, rendered frames and the world for a full run."""
    world = build_world(spec)
    poses = generate_trajectory(spec.trajectory, spec.seed)
    frames = [render_observations(world, p, spec.camera, spec.noise, spec.seed, k,
                                  spec.max_points, spec.max_lines, spec.max_range)
              for k, p in enumerate(poses)]
    return poses, frames, world
