"""Per-ion optical tweezer pinning and offset-induced local stress.

Cylindrical tweezers act in the yz plane only, adding nu_i^2 to the
curvature seen by ion i.  When a tweezer focus is offset from the ion's
equilibrium it also pulls on the ion; the first-order machinery here
(displacements from the inverse static Hessian, Hessian correction from
the Coulomb third derivatives) approximates the re-equilibration, and the
exact nonlinear solver validates it.  Everything operates in the
2N-dimensional yz subspace of a planar crystal; component (i, alpha) of a
flat vector is index 2*i + alpha with alpha in (y, z).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .coulomb import (
    coulomb_gradient,
    coulomb_hessian,
    coulomb_third_derivative_contraction,
)
from .equilibrium import ConvergenceError, IonCrystal
from .mathieu import characteristic_exponent
from .units import TrapParams, UnitSystem, pseudo_frequencies

DEFAULT_MAX_NU_SI = 2 * np.pi * 1.0e6  # rad/s
DEFAULT_MAX_OFFSET_SI = 0.25e-6  # m


@dataclass
class TweezerPattern:
    """Per-ion pinning frequencies and yz tweezer offsets (dimensionless).

    ``nu`` has one entry per ion in units of the attached unit system's
    characteristic frequency; ``offsets`` is (N, 2) in characteristic
    lengths.  Bounds are stored dimensionless alongside.
    """

    nu: np.ndarray
    unit_system: UnitSystem
    offsets: np.ndarray = None
    waist: float = 1.0e-6  # meters, metadata only
    max_nu: float = None
    max_offset: float = None

    def __post_init__(self):
        self.nu = np.asarray(self.nu, dtype=float)
        n = self.nu.shape[0]
        if self.offsets is None:
            self.offsets = np.zeros((n, 2))
        self.offsets = np.asarray(self.offsets, dtype=float).reshape(n, 2)
        if self.max_nu is None:
            self.max_nu = DEFAULT_MAX_NU_SI / self.unit_system.char_frequency
        if self.max_offset is None:
            self.max_offset = DEFAULT_MAX_OFFSET_SI / self.unit_system.char_length
        if np.any(self.nu < 0) or np.any(self.nu > self.max_nu * (1 + 1e-12)):
            raise ValueError("pinning frequencies outside [0, max_nu]")
        if np.any(np.abs(self.offsets) > self.max_offset * (1 + 1e-12)):
            raise ValueError("tweezer offsets exceed the harmonic-validity bound")

    @property
    def n_ions(self) -> int:
        return self.nu.shape[0]

    @classmethod
    def from_si(
        cls,
        nu_si,
        units: UnitSystem,
        offsets_si=None,
        waist: float = 1.0e-6,
        max_nu_si: float = DEFAULT_MAX_NU_SI,
        max_offset_si: float = DEFAULT_MAX_OFFSET_SI,
    ) -> "TweezerPattern":
        nu = np.asarray(nu_si, dtype=float) / units.char_frequency
        offsets = (
            None
            if offsets_si is None
            else np.asarray(offsets_si, dtype=float) / units.char_length
        )
        return cls(
            nu=nu,
            unit_system=units,
            offsets=offsets,
            waist=waist,
            max_nu=max_nu_si / units.char_frequency,
            max_offset=max_offset_si / units.char_length,
        )

    def rescaled(self, units: UnitSystem) -> "TweezerPattern":
        """Express the same physical pattern in another unit system."""
        f = self.unit_system.char_frequency / units.char_frequency
        ell = self.unit_system.char_length / units.char_length
        return TweezerPattern(
            nu=self.nu * f,
            unit_system=units,
            offsets=self.offsets * ell,
            waist=self.waist,
            max_nu=self.max_nu * f,
            max_offset=self.max_offset * ell,
        )

    def with_offsets(self, offsets) -> "TweezerPattern":
        return TweezerPattern(
            nu=self.nu.copy(),
            unit_system=self.unit_system,
            offsets=np.asarray(offsets, dtype=float).reshape(self.n_ions, 2),
            waist=self.waist,
            max_nu=self.max_nu,
            max_offset=self.max_offset,
        )


def tweezer_diagonal(pattern: TweezerPattern, n: int) -> np.ndarray:
    """2N x 2N diagonal matrix of nu_i^2 on the (y, z) components."""
    if pattern.n_ions != n:
        raise ValueError("pattern size mismatch")
    return np.diag(np.repeat(pattern.nu**2, 2))


def yz_trap_curvature(
    trap: TrapParams, units: UnitSystem, exact_gamma: bool = False
) -> np.ndarray:
    """Dimensionless squared trap frequencies (theta_y^2, theta_z^2)."""
    if exact_gamma:
        gamma = np.array(
            [characteristic_exponent(a, q) for a, q in zip(trap.a, trap.q)]
        )
        theta = 0.5 * trap.omega_rf * gamma / units.char_frequency
    else:
        theta = pseudo_frequencies(trap) / units.char_frequency
    return theta[1:] ** 2


def static_yz_hessian(
    positions_yz: np.ndarray, theta_sq_yz: np.ndarray
) -> np.ndarray:
    """Trap + Coulomb Hessian of the planar crystal in the yz subspace."""
    n = positions_yz.shape[0]
    return coulomb_hessian(positions_yz) + np.diag(np.tile(theta_sq_yz, n))


def stress_displacement(d_tot0: np.ndarray, pattern: TweezerPattern) -> np.ndarray:
    """First-order equilibrium shift rho = D_tot(0)^-1 nu^2 dr (2N flat).

    ``d_tot0`` must be the total static Hessian including the tweezer
    diagonal.  Raises on a singular (unstable) Hessian.
    """
    n = pattern.n_ions
    if d_tot0.shape != (2 * n, 2 * n):
        raise ValueError("d_tot0 must be 2N x 2N")
    rhs = np.repeat(pattern.nu**2, 2) * pattern.offsets.ravel()
    try:
        return np.linalg.solve(d_tot0, rhs)
    except np.linalg.LinAlgError as err:
        raise ValueError("singular total Hessian (unstable crystal)") from err


def stress_third_contraction(
    positions_yz: np.ndarray, rho: np.ndarray
) -> np.ndarray:
    """Coulomb third-derivative contraction with the displacement field rho.

    Only the Coulomb interaction contributes: trap and tweezer curvatures
    are constant diagonals.
    """
    return coulomb_third_derivative_contraction(positions_yz, rho)


def stressed_hessian(
    d_tot0: np.ndarray, third_contraction: np.ndarray
) -> np.ndarray:
    """First-order stressed Hessian D_tot(rho) ~ D_tot(0) + (grad D0) rho."""
    out = d_tot0 + third_contraction
    return 0.5 * (out + out.T)


def exact_stressed_equilibrium(
    crystal: IonCrystal,
    trap: TrapParams,
    pattern: TweezerPattern,
    exact_gamma: bool = False,
    grad_tol: float = 1e-12,
    max_iter: int = 100,
) -> tuple:
    """Nonlinear yz re-equilibration with offset tweezers, and its Hessian.

    Solves grad(V_pseudo + V_coulomb + V_tweezer) = 0 by Newton iteration
    starting from the unperturbed positions; the tweezer of ion i is
    centered at R_i + dr_i.  Returns (positions (N,2), hessian (2N,2N)),
    both dimensionless in the crystal's units.  This is the validation
    oracle for the first-order stress path.
    """
    if crystal.static_positions is None:
        raise ValueError("crystal has no static positions (pseudopotential regime)")
    n = crystal.n_ions
    if pattern.n_ions != n:
        raise ValueError("pattern size mismatch")
    theta_sq = yz_trap_curvature(trap, crystal.unit_system, exact_gamma)
    r0 = crystal.static_positions[:, 1:].copy()
    centers = r0 + pattern.offsets
    nu_sq = pattern.nu**2

    pos = r0.copy()
    for _ in range(max_iter):
        grad = (
            theta_sq[None, :] * pos
            + coulomb_gradient(pos)
            + nu_sq[:, None] * (pos - centers)
        )
        if np.max(np.abs(grad)) < grad_tol:
            break
        hess = (
            coulomb_hessian(pos)
            + np.diag(np.tile(theta_sq, n))
            + np.diag(np.repeat(nu_sq, 2))
        )
        step = np.linalg.solve(hess, -grad.ravel())
        # damp absurd steps (far outside the perturbative regime)
        norm = np.max(np.abs(step))
        if norm > 1.0:
            step *= 1.0 / norm
        pos = pos + step.reshape(n, 2)
    else:
        raise ConvergenceError("stressed equilibrium Newton iteration stalled")

    hess = (
        coulomb_hessian(pos)
        + np.diag(np.tile(theta_sq, n))
        + np.diag(np.repeat(nu_sq, 2))
    )
    return pos, hess
