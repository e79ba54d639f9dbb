"""SE(3) machinery.

Conventions used throughout the package:

* A tangent vector is ``xi = (v, w)``: translation part first (meters),
  rotation part second (radians).
* Poses are perturbed on the left, ``T <- exp(delta) @ T``; every Jacobian
  in the package is taken with respect to that ``delta``.
* A keyframe pose maps world coordinates into the camera frame
  (``X_c = R @ X_w + t``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SMALL_ANGLE = 1e-5
_NEAR_PI = 1e-6
_SERIES_ANGLE = 1e-3  # closed forms cancel badly below this


def hat3(w: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]],
        dtype=float,
    )


def vee3(W: np.ndarray) -> np.ndarray:
    return np.array([W[2, 1], W[0, 2], W[1, 0]], dtype=float)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R @ x + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Transform a point, or an (N, 3) array of points."""
        X = np.asarray(X, dtype=float)
        return X @ self.R.T + self.t

    def inverse(self) -> "Pose":
        return inverse(self)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def log(self) -> np.ndarray:
        return se3_log(self)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.R, other.R, atol=atol)
            and np.allclose(self.t, other.t, atol=atol)
        )

    def __repr__(self) -> str:
        return f"Pose(t={self.t.tolist()}, w={se3_log(self)[3:].tolist()})"


@dataclass(frozen=True, eq=False)
class MotionEstimate:
    """Gaussian on se(3): tangent mean plus 6x6 covariance.

    The covariance describes additive noise on ``mean`` itself.
    """

    mean: np.ndarray
    covariance: np.ndarray
    inlier_ratio: float = 1.0

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(6)
        cov = np.array(self.covariance, dtype=float).reshape(6, 6)
        cov = 0.5 * (cov + cov.T)
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @classmethod
    def zero(cls) -> "MotionEstimate":
        return cls(np.zeros(6), np.zeros((6, 6)))

    @property
    def pose(self) -> Pose:
        return se3_exp(self.mean)


ORTHO_TOL = 1e-12


def _reorthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation (polar factor) once rounding drift exceeds ``ORTHO_TOL``.

    Long chains of compositions otherwise let ``R^T`` drift away from
    ``R^-1``, and the error compounds through every inverse.
    """
    if np.abs(R @ R.T - np.eye(3)).max() <= ORTHO_TOL:
        return R
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(_reorthonormalize(a.R @ b.R), a.R @ b.t + a.t)


def inverse(a: Pose) -> Pose:
    Rt = a.R.T
    return Pose(Rt, -Rt @ a.t)


def _coefficients(theta: float) -> tuple[float, float, float]:
    """sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with series near zero."""
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        t4 = t2 * t2
        return (1.0 - t2 / 6.0 + t4 / 120.0, 0.5 - t2 / 24.0 + t4 / 720.0,
                1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0)
    s, c = np.sin(theta), np.cos(theta)
    return s / theta, (1.0 - c) / theta**2, (theta - s) / theta**3


def so3_exp(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    A, B, _ = _coefficients(theta)
    W = hat3(w)
    return np.eye(3) + A * W + B * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of ``R`` with angle in [0, pi].

    At angle pi the axis is recovered from the symmetric part ``(R + I) / 2``;
    the sign is taken from the (tiny) antisymmetric part when it carries one,
    otherwise the axis with a positive largest component is returned.
    """
    R = np.asarray(R, dtype=float)
    axis_sin = 0.5 * vee3(R - R.T)
    s = float(np.linalg.norm(axis_sin))
    c = 0.5 * (np.trace(R) - 1.0)
    theta = float(np.arctan2(s, c))
    if theta < _SMALL_ANGLE:
        return axis_sin * (1.0 + theta * theta / 6.0)
    if np.pi - theta > _NEAR_PI:
        return axis_sin * (theta / s)
    S = 0.5 * (R + np.eye(3))
    k = int(np.argmax(np.diag(S)))
    n = S[:, k] / np.sqrt(max(S[k, k], 1e-300))
    n /= np.linalg.norm(n)
    if float(n @ axis_sin) < 0.0:
        n = -n
    return theta * n


def so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    _, B, C = _coefficients(theta)
    W = hat3(w)
    return np.eye(3) + B * W + C * (W @ W)


def so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    W = hat3(w)
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        k = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        A, B, _ = _coefficients(theta)
        k = (1.0 - A / (2.0 * B)) / theta**2
    return np.eye(3) - 0.5 * W + k * (W @ W)


def se3_exp(xi: np.ndarray) -> Pose:
    xi = np.asarray(xi, dtype=float).reshape(6)
    v, w = xi[:3], xi[3:]
    return Pose(so3_exp(w), so3_left_jacobian(w) @ v)


def se3_log(T: Pose) -> np.ndarray:
    w = so3_log(T.R)
    v = so3_left_jacobian_inv(w) @ T.t
    return np.concatenate([v, w])


def adjoint(T: Pose) -> np.ndarray:
    """6x6 adjoint: ``exp(Ad_T xi) = T exp(xi) T^-1``."""
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = T.R
    Ad[:3, 3:] = hat3(T.t) @ T.R
    Ad[3:, 3:] = T.R
    return Ad


def _q_block(xi: np.ndarray) -> np.ndarray:
    v, w = xi[:3], xi[3:]
    theta = float(np.linalg.norm(w))
    V = hat3(v)
    W = hat3(w)
    if theta < 1e-2:
        t2 = theta * theta
        t4 = t2 * t2
        c1 = 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0
        c2 = 1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0
        c3 = 1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        c1 = (theta - s) / theta**3
        c2 = (theta**2 + 2.0 * c - 2.0) / (2.0 * theta**4)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta**5)
    WV = W @ V
    VW = V @ W
    WVW = WV @ W
    WW = W @ W
    return (
        0.5 * V
        + c1 * (WV + VW + WVW)
        + c2 * (WW @ V + V @ WW - 3.0 * WVW)
        + c3 * (WVW @ W + WW @ VW)
    )


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    """``exp(xi + d) ~= exp(J_l(xi) d) exp(xi)`` to first order."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    J = np.zeros((6, 6))
    Jw = so3_left_jacobian(xi[3:])
    J[:3, :3] = Jw
    J[3:, 3:] = Jw
    J[:3, 3:] = _q_block(xi)
    return J


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float).reshape(6)
    Jw_inv = so3_left_jacobian_inv(xi[3:])
    Jinv = np.zeros((6, 6))
    Jinv[:3, :3] = Jw_inv
    Jinv[3:, 3:] = Jw_inv
    Jinv[:3, 3:] = -Jw_inv @ _q_block(xi) @ Jw_inv
    return Jinv


def se3_right_jacobian(xi: np.ndarray) -> np.ndarray:
    return se3_left_jacobian(-np.asarray(xi, dtype=float))


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


def composition_jacobians(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean and Jacobians of ``c = log(exp(a) exp(b))`` w.r.t. ``a`` and ``b``."""
    c = se3_log(compose(se3_exp(a), se3_exp(b)))
    J_a = se3_left_jacobian_inv(c) @ se3_left_jacobian(a)
    J_b = se3_right_jacobian_inv(c) @ se3_right_jacobian(b)
    return c, J_a, J_b


def compose_with_covariance(a: MotionEstimate, b: MotionEstimate) -> MotionEstimate:
    """First-order propagation of ``exp(a) exp(b)`` for independent a, b."""
    c, J_a, J_b = composition_jacobians(a.mean, b.mean)
    cov = J_a @ a.covariance @ J_a.T + J_b @ b.covariance @ J_b.T
    return MotionEstimate(c, cov, min(a.inlier_ratio, b.inlier_ratio))


def rotation_angle(R: np.ndarray) -> float:
    return float(np.linalg.norm(so3_log(R)))
