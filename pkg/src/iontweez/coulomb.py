"""Analytic derivatives of the dimensionless Coulomb energy.

The mutual Coulomb energy of N unit charges at dimensionless positions
r_i (shape (N, ndim)) is V = (1/2) sum_{i != j} 1/|r_i - r_j|.  This module
provides the energy, gradient, Hessian and the third-derivative contraction
used by the local-stress expansion.  Flattened indices follow C order of the
(N, ndim) array: component (i, alpha) maps to i*ndim + alpha.
"""

from __future__ import annotations

import numpy as np


class CoincidentIonsError(ValueError):
    """Two ions are closer than the collision guard allows."""


def _pair_geometry(positions: np.ndarray, min_separation: float = 1e-9):
    """Pairwise displacement unit vectors and distances.

    Returns (diff, dist) with diff[i, j] = r_i - r_j and dist[i, j] = |diff|;
    the diagonal of dist is set to inf so it can be divided by safely.
    """
    pos = np.asarray(positions, dtype=float)
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    n = pos.shape[0]
    off = ~np.eye(n, dtype=bool)
    if np.any(dist[off] < min_separation):
        i, j = np.argwhere(off & (dist < min_separation))[0]
        raise CoincidentIonsError(
            f"ions {i} and {j} closer than {min_separation:g} (d = {dist[i, j]:.3e})"
        )
    dist[np.eye(n, dtype=bool)] = np.inf
    return diff, dist


def coulomb_energy(positions: np.ndarray) -> float:
    _, dist = _pair_geometry(positions)
    return 0.5 * float(np.sum(1.0 / dist))


def coulomb_gradient(positions: np.ndarray) -> np.ndarray:
    """Gradient of the Coulomb energy, same shape as ``positions``."""
    diff, dist = _pair_geometry(positions)
    # dV/dr_i = -sum_{j != i} (r_i - r_j)/|r_i - r_j|^3
    return -np.sum(diff / dist[:, :, None] ** 3, axis=1)


def coulomb_hessian(positions: np.ndarray) -> np.ndarray:
    """Hessian of the Coulomb energy as an (N*ndim, N*ndim) symmetric matrix.

    Off-diagonal (i, j) blocks are -(3 e e^T - 1)/s^3 with e the unit
    separation vector and s the distance; diagonal blocks make the row sums
    over j vanish (translation invariance).
    """
    pos = np.asarray(positions, dtype=float)
    n, ndim = pos.shape
    diff, dist = _pair_geometry(pos)
    e = diff / dist[:, :, None]
    # blocks[i, j] = (3 e e^T - 1) / s^3 for j != i
    blocks = 3.0 * e[:, :, :, None] * e[:, :, None, :]
    blocks -= np.eye(ndim)[None, None, :, :]
    blocks /= dist[:, :, None, None] ** 3
    idx = np.arange(n)
    blocks[idx, idx] = 0.0
    hess = -blocks  # off-diagonal blocks
    hess[idx, idx] = np.sum(blocks, axis=1)  # diagonal blocks
    return hess.transpose(0, 2, 1, 3).reshape(n * ndim, n * ndim)


def coulomb_third_derivative_contraction(
    positions: np.ndarray, rho: np.ndarray
) -> np.ndarray:
    """Directional derivative of the Coulomb Hessian along displacement rho.

    Computes sum_c (d H_ab / d r_c) rho_c analytically, i.e. the first-order
    change of ``coulomb_hessian`` when every ion i moves by rho_i.  ``rho``
    may be flat of length N*ndim or shaped (N, ndim).  Output is symmetric
    and vanishes for a uniform rho (translation invariance).
    """
    pos = np.asarray(positions, dtype=float)
    n, ndim = pos.shape
    rho = np.asarray(rho, dtype=float).reshape(n, ndim)
    diff, dist = _pair_geometry(pos)
    e = diff / dist[:, :, None]
    drho = rho[:, None, :] - rho[None, :, :]  # rho_i - rho_j
    # Third derivative of 1/|u| contracted with w:
    # g_abc w_c = (3/s^4) [(e.w)(delta_ab - 5 e_a e_b) + e_a w_b + e_b w_a]
    ew = np.sum(e * drho, axis=-1)  # (n, n)
    eye = np.eye(ndim)
    g = (
        ew[:, :, None, None] * (eye[None, None] - 5.0 * e[:, :, :, None] * e[:, :, None, :])
        + e[:, :, :, None] * drho[:, :, None, :]
        + drho[:, :, :, None] * e[:, :, None, :]
    )
    g *= 3.0 / dist[:, :, None, None] ** 4
    idx = np.arange(n)
    g[idx, idx] = 0.0
    # dH_{i,j}/dr contracted: off-diagonal blocks get -g(u_ij)·(rho_i - rho_j),
    # diagonal blocks get +sum_j g(u_ij)·(rho_i - rho_j)
    out = -g
    out[idx, idx] = np.sum(g, axis=1)
    return out.transpose(0, 2, 1, 3).reshape(n * ndim, n * ndim)
