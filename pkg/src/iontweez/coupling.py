"""Phonon-mediated spin-spin coupling matrices and the match error.

The engineered coupling between ions i and j is a sum over modes of
(k.b_i)(k.b_j)/(mu^2 - w_m^2), with k the Raman-pair wave vector, mu the
beat-note frequency and (w_m, b_m) the mode structure.  Targets, Doppler
carrier reduction and the normalized Frobenius error live here too.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .equilibrium import IonCrystal
from .modes import ModeStructure, ResonanceError
from .units import TrapParams, UnitSystem


def bessel_j0(x):
    """Zeroth-order Bessel function of the first kind by power series.

    Accurate to ~1e-12 for |x| <= 8, which covers all physical modulation
    indices here; no asymptotic branch is provided.
    """
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) > 20.0):
        raise ValueError("series evaluation limited to |x| <= 20")
    z = -(x * x) / 4.0
    term = np.ones_like(z)
    total = np.ones_like(z)
    for k in range(1, 120):
        term = term * z / (k * k)
        total = total + term
        if np.all(np.abs(term) < 1e-18 * np.maximum(np.abs(total), 1e-30)):
            break
    return total if total.ndim else float(total)


@dataclass(frozen=True)
class RamanDrive:
    """Raman beam-pair drive: wave vector (dimensionless k*d) and beatnote.

    ``mu`` is dimensionless in the same units as the mode frequencies.
    """

    k: np.ndarray
    mu: float

    def __post_init__(self):
        k = np.array(self.k, dtype=float)
        if k.shape != (3,):
            raise ValueError("k must be a 3-vector")
        if np.linalg.norm(k) == 0:
            raise ValueError("k must be nonzero")
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        k.setflags(write=False)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "mu", float(self.mu))

    @staticmethod
    def from_si(
        direction,
        mu_si: float,
        units: UnitSystem,
        wavelength: float = 411e-9,
    ) -> "RamanDrive":
        """Build from a direction, SI beatnote (rad/s) and laser wavelength (m)."""
        direction = np.asarray(direction, dtype=float)
        norm = np.linalg.norm(direction)
        if norm == 0:
            raise ValueError("direction must be nonzero")
        k_mag = 2.0 * np.pi / wavelength * units.char_length
        return RamanDrive(k=direction / norm * k_mag, mu=mu_si / units.char_frequency)

    def with_mu(self, mu: float) -> "RamanDrive":
        return RamanDrive(k=self.k.copy(), mu=mu)


@dataclass
class CouplingMatrix:
    """Symmetric N x N spin-spin interaction matrix with zero diagonal."""

    j: np.ndarray
    relative: bool = True  # normalization-free (scale fixed only up to rescaling)

    def __post_init__(self):
        j = np.array(self.j, dtype=float)
        if j.ndim != 2 or j.shape[0] != j.shape[1]:
            raise ValueError("j must be square")
        if np.max(np.abs(j - j.T)) > 1e-12 * max(1.0, np.max(np.abs(j))):
            raise ValueError("j must be symmetric")
        np.fill_diagonal(j, 0.0)
        self.j = j

    @property
    def n_ions(self) -> int:
        return self.j.shape[0]

    def frobenius(self) -> float:
        return float(np.linalg.norm(self.j))


@dataclass
class DopplerModel:
    """Per-ion micromotion modulation indices and carrier factors J0(beta)."""

    beta: np.ndarray
    carrier_factors: np.ndarray = field(default=None)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        if np.any(self.beta < 0):
            raise ValueError("modulation indices must be >= 0")
        if self.carrier_factors is None:
            self.carrier_factors = bessel_j0(self.beta)


def spin_spin_matrix(modes: ModeStructure, drive: RamanDrive) -> CouplingMatrix:
    """Engineered coupling matrix from a mode structure and Raman drive.

    Raises ResonanceError if mu coincides with a mode frequency at machine
    precision; staying outside the virtual-phonon gap is the caller's
    responsibility.
    """
    freqs = modes.frequencies
    if np.any(freqs <= 0):
        raise ValueError("mode structure contains unstable modes")
    mu = drive.mu
    denom = mu**2 - freqs**2
    if np.any(np.abs(denom) < 1e-14 * mu**2):
        raise ResonanceError("beatnote exactly resonant with a mode")
    n = modes.n_ions
    # k-projection of every mode on every ion: P[i, m] = sum_a k_a b_{(i,a),m}
    proj = np.tensordot(
        drive.k, modes.modes.reshape(n, 3, -1), axes=(0, 1)
    )  # (n, n_modes)
    j = (proj / denom[None, :]) @ proj.T
    np.fill_diagonal(j, 0.0)
    j = 0.5 * (j + j.T)  # scrub roundoff asymmetry
    return CouplingMatrix(j=j)


def doppler_indices(
    crystal: IonCrystal, trap: TrapParams, drive: RamanDrive
) -> DopplerModel:
    """Modulation index beta_i = (1/2)|sum_a k_a Rbar_{i,a} q_a| per ion."""
    positions = crystal.period_average
    beta = 0.5 * np.abs(positions @ (drive.k * trap.q))
    return DopplerModel(beta=beta)


def apply_doppler(j: CouplingMatrix, model: DopplerModel) -> CouplingMatrix:
    """Scale couplings by the carrier factors: J0(beta_i) J0(beta_j) J_ij."""
    c = model.carrier_factors
    if c.shape[0] != j.n_ions:
        raise ValueError("Doppler model size mismatch")
    return CouplingMatrix(j=c[:, None] * j.j * c[None, :], relative=j.relative)


def optimal_scale(engineered: CouplingMatrix, target: CouplingMatrix) -> float:
    """Scalar s minimizing ||J_T - s J_E||_F (0 when J_E vanishes)."""
    je = engineered.j
    jt = target.j
    denom = float(np.sum(je * je))
    if denom == 0.0:
        return 0.0
    return float(np.sum(jt * je)) / denom


def coupling_error(
    engineered: CouplingMatrix, target: CouplingMatrix, rescale: bool = True
) -> float:
    """Normalized Frobenius mismatch between target and engineered couplings.

    With ``rescale`` (default) the engineered matrix is first multiplied by
    the optimal scalar, making the error insensitive to the overall coupling
    strength; only the interaction pattern is compared.
    """
    if engineered.n_ions != target.n_ions:
        raise ValueError("matrix sizes differ")
    norm_t = target.frobenius()
    if norm_t == 0.0:
        raise ValueError("target matrix has zero norm")
    s = optimal_scale(engineered, target) if rescale else 1.0
    return float(np.linalg.norm(target.j - s * engineered.j)) / norm_t


def target_spin_ladder(
    n: int, j1: float, j2: float, positions: Optional[np.ndarray] = None
) -> CouplingMatrix:
    """Zigzag spin-ladder target: j1 between z-consecutive ions, j2 between
    next-nearest (same-leg) ions.

    Without ``positions`` the matrix is in chain (z-sorted) order; with the
    crystal positions it is permuted to ion-index order.
    """
    n = int(n)
    if n % 2 or n < 4:
        raise ValueError("spin ladder needs an even ion count >= 4")
    j = np.zeros((n, n))
    for i in range(n - 1):
        j[i, i + 1] = j[i + 1, i] = j1
    for i in range(n - 2):
        j[i, i + 2] = j[i + 2, i] = j2
    if positions is not None:
        order = np.argsort(np.asarray(positions)[:, 2], kind="stable")
        perm = np.empty_like(order)
        perm[order] = np.arange(n)  # ion -> chain rank
        j = j[np.ix_(perm, perm)]
    return CouplingMatrix(j=j)


def target_power_law(
    n: int, exponent: float, positions: np.ndarray
) -> CouplingMatrix:
    """Distance power-law target J_ij = 1/|R_i - R_j|^xi."""
    if not 0 <= exponent <= 3:
        raise ValueError("exponent must lie in [0, 3]")
    positions = np.asarray(positions, dtype=float)
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    np.fill_diagonal(dist, np.inf)
    return CouplingMatrix(j=dist**-exponent)
