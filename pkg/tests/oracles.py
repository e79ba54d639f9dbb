"""Independent reference implementations used only by the tests."""

import numpy as np
from scipy.linalg import expm, logm
from scipy.spatial.transform import Rotation


def twist_matrix(xi) -> np.ndarray:
    v, w = np.asarray(xi[:3], float), np.asarray(xi[3:], float)
    T = np.zeros((4, 4))
    T[:3, :3] = [[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]]
    T[:3, 3] = v
    return T


def expm_pose(xi) -> np.ndarray:
    """4x4 SE(3) element by the matrix exponential."""
    return expm(twist_matrix(xi))


def logm_twist(T) -> np.ndarray:
    L = np.real(logm(np.asarray(T, float)))
    return np.array([L[0, 3], L[1, 3], L[2, 3], L[2, 1], L[0, 2], L[1, 0]])


def _skew(w):
    W = np.zeros(w.shape[:-1] + (3, 3))
    W[..., 0, 1], W[..., 0, 2] = -w[..., 2], w[..., 1]
    W[..., 1, 0], W[..., 1, 2] = w[..., 2], -w[..., 0]
    W[..., 2, 0], W[..., 2, 1] = -w[..., 1], w[..., 0]
    return W


def _v_matrix(w):
    th = np.linalg.norm(w, axis=-1)[..., None, None]
    W = _skew(w)
    th = np.maximum(th, 1e-12)
    B = (1 - np.cos(th)) / th ** 2
    C = (th - np.sin(th)) / th ** 3
    return np.eye(3) + B * W + C * (W @ W)


def batch_exp(xi):
    """(N, 6) tangents -> (N, 4, 4) homogeneous matrices."""
    xi = np.asarray(xi, float)
    T = np.zeros((len(xi), 4, 4))
    T[:, :3, :3] = Rotation.from_rotvec(xi[:, 3:]).as_matrix()
    T[:, :3, 3] = np.einsum("nij,nj->ni", _v_matrix(xi[:, 3:]), xi[:, :3])
    T[:, 3, 3] = 1
    return T


def batch_log(T):
    """(N, 4, 4) -> (N, 6) tangents (v, w)."""
    w = Rotation.from_matrix(T[:, :3, :3]).as_rotvec()
    v = np.linalg.solve(_v_matrix(w), T[:, :3, 3][..., None])[..., 0]
    return np.concatenate([v, w], axis=1)


def monte_carlo_chain(means, covs, n, rng):
    """Sample covariance of log(exp(x1) ... exp(xk)) with x_i ~ N(mean_i, cov_i)."""
    T = np.broadcast_to(np.eye(4), (n, 4, 4)).copy()
    for m, c in zip(means, covs):
        x = rng.multivariate_normal(m, c, size=n)
        T = T @ batch_exp(x)
    return np.cov(batch_log(T).T)


def brute_kitti(G, E, lengths):
    """Per-subsequence drift written out in homogeneous matrices."""
    Gm = [g.matrix() for g in G]
    Em = [e.matrix() for e in E]
    pos = np.array([g[:3, 3] for g in Gm])
    dist = [0.0]
    for a, b in zip(pos[:-1], pos[1:]):
        dist.append(dist[-1] + float(np.sqrt(np.sum((b - a) ** 2))))
    t_err, r_err = [], []
    for i in range(len(Gm)):
        for L in lengths:
            j = next((k for k in range(i, len(Gm)) if dist[k] - dist[i] >= L - 1e-12), None)
            if j is None:
                continue
            d = dist[j] - dist[i]
            rg = np.linalg.inv(Gm[i]) @ Gm[j]
            re = np.linalg.inv(Em[i]) @ Em[j]
            err = np.linalg.inv(re) @ rg
            t_err.append(np.linalg.norm(err[:3, 3]) / d)
            cos = np.clip((np.trace(err[:3, :3]) - 1) / 2, -1, 1)
            r_err.append(np.arccos(cos) / d)
    return 100 * np.mean(t_err), np.degrees(np.mean(r_err)) * 100


def brute_rpe(G, E):
    """Consecutive relative pose errors via matrix logarithms."""
    te, re = [], []
    for k in range(len(G) - 1):
        rg = np.linalg.inv(G[k].matrix()) @ G[k + 1].matrix()
        rel = np.linalg.inv(E[k].matrix()) @ E[k + 1].matrix()
        xi = logm_twist(np.linalg.inv(rg) @ rel)
        te.append(np.linalg.norm(xi[:3]))
        re.append(np.linalg.norm(xi[3:]))
    return np.array(te), np.array(re)
