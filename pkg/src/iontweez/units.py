"""Dimensionless unit system and Paul-trap parameterization.

All internal computations use dimensionless quantities: lengths in units of
the characteristic length ``d``, times in units of ``1/char_frequency`` and
frequencies in units of ``char_frequency``.  SI values appear only at I/O
boundaries.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

# CODATA 2018
ELEMENTARY_CHARGE = 1.602176634e-19  # C
EPSILON_0 = 8.8541878128e-12  # F/m
ATOMIC_MASS = 1.66053906660e-27  # kg

# Pseudopotential validity thresholds (|a|, q^2 << 1)
_A_WARN = 0.05
_Q2_WARN = 0.1


class UnconfinedAxisError(ValueError):
    """Raised when a trap axis has no net (pseudopotential) confinement."""


def characteristic_length(mass: float, char_frequency: float) -> float:
    """Length scale d = (e^2 / (4 pi eps0 m w^2))^(1/3) in meters.

    Parameters
    ----------
    mass : float
        Ion mass in kg.
    char_frequency : float
        Characteristic angular frequency in rad/s.
    """
    if mass <= 0:
        raise ValueError(f"mass must be positive, got {mass}")
    if char_frequency <= 0:
        raise ValueError(f"char_frequency must be positive, got {char_frequency}")
    coulomb = ELEMENTARY_CHARGE**2 / (4.0 * np.pi * EPSILON_0)
    return (coulomb / (mass * char_frequency**2)) ** (1.0 / 3.0)


@dataclass(frozen=True)
class UnitSystem:
    """Dimensionless unit system for a single ion species.

    Attributes
    ----------
    mass : float
        Ion mass in kg.
    char_frequency : float
        Characteristic angular frequency (rad/s); times are measured in
        1/char_frequency and angular frequencies in char_frequency.
    charge : int
        Charge state in units of e.
    """

    mass: float
    char_frequency: float
    charge: int = 1

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        if self.char_frequency <= 0:
            raise ValueError("char_frequency must be positive")
        if self.charge < 1:
            raise ValueError("charge must be a positive integer")

    @property
    def char_length(self) -> float:
        """Characteristic length d in meters."""
        # Coulomb energy of charge Z*e at distance d equals m w^2 d^2
        coulomb = (self.charge * ELEMENTARY_CHARGE) ** 2 / (4.0 * np.pi * EPSILON_0)
        return (coulomb / (self.mass * self.char_frequency**2)) ** (1.0 / 3.0)

    @property
    def energy_scale(self) -> float:
        """Energy unit m * w^2 * d^2 in Joules."""
        return self.mass * self.char_frequency**2 * self.char_length**2

    # --- SI <-> dimensionless conversions -------------------------------
    def length_to_si(self, x):
        return np.asarray(x) * self.char_length

    def length_from_si(self, x):
        return np.asarray(x) / self.char_length

    def frequency_to_si(self, w):
        """Dimensionless angular frequency -> rad/s."""
        return np.asarray(w) * self.char_frequency

    def frequency_from_si(self, w):
        return np.asarray(w) / self.char_frequency

    def time_to_si(self, t):
        return np.asarray(t) / self.char_frequency

    def time_from_si(self, t):
        return np.asarray(t) * self.char_frequency

    def with_char_frequency(self, char_frequency: float) -> "UnitSystem":
        return UnitSystem(self.mass, char_frequency, self.charge)


@dataclass(frozen=True)
class TrapParams:
    """Mathieu parameterization of an RF Paul trap.

    Attributes
    ----------
    a, q : arrays of shape (3,)
        Dimensionless DC and RF Mathieu parameters per axis (x, y, z).
    omega_rf : float
        RF drive angular frequency in rad/s.
    n_ions : int
        Number of ions.
    """

    a: np.ndarray
    q: np.ndarray
    omega_rf: float
    n_ions: int

    def __post_init__(self):
        a = np.array(self.a, dtype=float)
        q = np.array(self.q, dtype=float)
        if a.shape != (3,) or q.shape != (3,):
            raise ValueError("a and q must be 3-vectors")
        if self.omega_rf <= 0:
            raise ValueError("omega_rf must be positive")
        if int(self.n_ions) < 1:
            raise ValueError("n_ions must be >= 1")
        gamma_sq = a + q**2 / 2.0
        if np.any(gamma_sq <= 0):
            bad = [("x", "y", "z")[i] for i in np.flatnonzero(gamma_sq <= 0)]
            raise UnconfinedAxisError(
                f"axis {','.join(bad)} unconfined: a + q^2/2 must be > 0"
            )
        if np.any(np.abs(a) >= _A_WARN) or np.any(q**2 >= _Q2_WARN):
            warnings.warn(
                "Mathieu parameters outside the |a|, q^2 << 1 regime; "
                "pseudopotential results may be inaccurate",
                stacklevel=2,
            )
        a.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "omega_rf", float(self.omega_rf))
        object.__setattr__(self, "n_ions", int(self.n_ions))

    @property
    def gamma(self) -> np.ndarray:
        """Lowest-order Mathieu characteristic exponents sqrt(a + q^2/2)."""
        return np.sqrt(self.a + self.q**2 / 2.0)

    def micromotion_units(self, mass: float, charge: int = 1) -> UnitSystem:
        """Unit system with char_frequency = omega_rf / 2 (drive pi-periodic)."""
        return UnitSystem(mass, self.omega_rf / 2.0, charge)


def pseudo_frequencies(trap: TrapParams) -> np.ndarray:
    """Pseudopotential angular frequencies Theta = (omega_rf/2) sqrt(a + q^2/2).

    Returns a 3-vector in rad/s.  Raises UnconfinedAxisError if any axis has
    a + q^2/2 <= 0 (already enforced at TrapParams construction, re-checked
    here for defensive use with hand-built inputs).
    """
    gamma_sq = trap.a + trap.q**2 / 2.0
    if np.any(gamma_sq <= 0):
        bad = [("x", "y", "z")[i] for i in np.flatnonzero(gamma_sq <= 0)]
        raise UnconfinedAxisError(f"axis {','.join(bad)} unconfined")
    return 0.5 * trap.omega_rf * np.sqrt(gamma_sq)
