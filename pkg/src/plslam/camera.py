"""Rectified stereo pinhole camera and projection helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDisparity, NonPositiveDepth
from .lie import Pose, hat3

Z_MIN = 1e-3
D_MIN = 0.1


@dataclass(frozen=True)
class StereoCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float = 1.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.baseline <= 0:
            raise ValueError("fx, fy and baseline must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def in_image(self, uv: np.ndarray) -> np.ndarray:
        uv = np.atleast_2d(uv)
        return (uv[:, 0] >= 0) & (uv[:, 0] < self.width) & (uv[:, 1] >= 0) & (uv[:, 1] < self.height)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "baseline": self.baseline, "width": self.width, "height": self.height,
        }


def project_camera(cam: StereoCamera, Xc: np.ndarray) -> np.ndarray:
    """Pinhole projection of camera-frame points, (3,) or (N, 3). No depth check."""
    Xc = np.asarray(Xc, dtype=float)
    z = Xc[..., 2]
    return np.stack([cam.fx * Xc[..., 0] / z + cam.cx, cam.fy * Xc[..., 1] / z + cam.cy], axis=-1)


def projection_jacobian(cam: StereoCamera, Xc: np.ndarray) -> np.ndarray:
    """d(pixel)/d(Xc), shape (..., 2, 3)."""
    Xc = np.asarray(Xc, dtype=float)
    x, y, z = Xc[..., 0], Xc[..., 1], Xc[..., 2]
    iz = 1.0 / z
    J = np.zeros(Xc.shape[:-1] + (2, 3))
    J[..., 0, 0] = cam.fx * iz
    J[..., 0, 2] = -cam.fx * x * iz * iz
    J[..., 1, 1] = cam.fy * iz
    J[..., 1, 2] = -cam.fy * y * iz * iz
    return J


def point_pose_jacobian(Xc: np.ndarray) -> np.ndarray:
    """d(Xc)/d(delta) for ``Xc' = exp(delta) Xc``; shape (..., 3, 6)."""
    Xc = np.asarray(Xc, dtype=float)
    J = np.zeros(Xc.shape[:-1] + (3, 6))
    J[..., 0, 0] = J[..., 1, 1] = J[..., 2, 2] = 1.0
    x, y, z = Xc[..., 0], Xc[..., 1], Xc[..., 2]
    # -[Xc]x
    J[..., 0, 4] = z
    J[..., 0, 5] = -y
    J[..., 1, 3] = -z
    J[..., 1, 5] = x
    J[..., 2, 3] = y
    J[..., 2, 4] = -x
    return J


def project_point(cam: StereoCamera, pose: Pose, Xw: np.ndarray, z_min: float = Z_MIN) -> np.ndarray:
    Xc = pose.apply(Xw)
    if not Xc[2] > z_min:
        raise NonPositiveDepth(f"depth {Xc[2]:.3g} <= {z_min}")
    return project_camera(cam, Xc)


def stereo_backproject(cam: StereoCamera, uL: float, vL: float, disparity: float,
                       d_min: float = D_MIN) -> np.ndarray:
    if not disparity > d_min:
        raise DegenerateDisparity(f"disparity {disparity:.3g} <= {d_min}")
    Z = cam.baseline * cam.fx / disparity
    return np.array([(uL - cam.cx) * Z / cam.fx, (vL - cam.cy) * Z / cam.fy, Z])


def backproject_many(cam: StereoCamera, uv: np.ndarray, disparity: np.ndarray) -> np.ndarray:
    """Vectorised :func:`stereo_backproject`; caller guarantees valid disparities."""
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    Z = cam.baseline * cam.fx / np.asarray(disparity, dtype=float).reshape(-1)
    return np.stack([(uv[:, 0] - cam.cx) * Z / cam.fx, (uv[:, 1] - cam.cy) * Z / cam.fy, Z], axis=1)


def disparity_of(cam: StereoCamera, Xc: np.ndarray) -> np.ndarray:
    return cam.baseline * cam.fx / np.asarray(Xc, dtype=float)[..., 2]


def depth_to_disparity(Z: float, b: float = 1.0, f: float = 1.0) -> float:
    """Disparity ``b * f / Z`` for a depth reading (baseline defaults to one)."""
    if not Z > 0:
        raise NonPositiveDepth(f"depth {Z!r} must be positive")
    return b * f / Z


__all__ = [
    "StereoCamera", "project_point", "stereo_backproject", "depth_to_disparity",
    "project_camera", "projection_jacobian", "point_pose_jacobian", "backproject_many",
    "disparity_of", "hat3", "Z_MIN", "D_MIN",
]
