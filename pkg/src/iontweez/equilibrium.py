"""Equilibrium configurations of the ion crystal.

Two solvers: a static one for the pseudopotential approximation (damped
dynamics followed by a Newton polish) and a time-periodic one for the full
RF drive (friction ramp-down followed by a Newton-shooting polish of the
periodic orbit).  The RF solver requires the char_frequency = omega_rf/2
convention so the drive is cos(2t) and the orbit pi-periodic.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .coulomb import coulomb_energy, coulomb_gradient, coulomb_hessian
from .units import TrapParams, UnitSystem, pseudo_frequencies

DEFAULT_GRAD_TOL = 1e-10
DEFAULT_PERIODICITY_TOL = 1e-8
DEFAULT_DRIFT_TOL = 1e-8
DEFAULT_MIN_SEPARATION = 1e-3
DEFAULT_STEPS_PER_PERIOD = 256


class ConvergenceError(RuntimeError):
    """Solver failed to reach its tolerance."""


class CollisionError(RuntimeError):
    """Ions approached closer than the collision guard during descent."""


class CrystalReorderError(RuntimeError):
    """Periodic orbit permuted the ions relative to the initial guess."""


@dataclass
class CoolingSchedule:
    """Friction ramp for the RF relaxation stage.

    The friction coefficient runs from f(0) = 1 to f(t_max) = 0; only the
    endpoints are physically meaningful, the linear profile and duration are
    numerical choices.
    """

    n_periods: int = 400
    profile: str = "linear"

    def friction(self, t: float, t_max: float) -> float:
        s = min(max(t / t_max, 0.0), 1.0)
        if self.profile == "linear":
            return 1.0 - s
        if self.profile == "cosine":
            return 0.5 * (1.0 + np.cos(np.pi * s))
        raise ValueError(f"unknown cooling profile {self.profile!r}")


@dataclass
class IonCrystal:
    """Equilibrium configuration, static and/or over one drive period.

    Positions are dimensionless in ``unit_system`` units.  ``trajectory``
    holds samples on the uniform grid ``times`` spanning exactly one drive
    period (endpoint included).
    """

    n_ions: int
    unit_system: UnitSystem
    static_positions: Optional[np.ndarray] = None
    trajectory: Optional[np.ndarray] = None
    times: Optional[np.ndarray] = None
    seed: Optional[int] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def period_average(self) -> np.ndarray:
        """Time average of the trajectory (static positions if no trajectory)."""
        if self.trajectory is not None:
            # endpoint duplicates t=0; average over the open interval
            return self.trajectory[:-1].mean(axis=0)
        if self.static_positions is None:
            raise ValueError("crystal has neither trajectory nor static positions")
        return self.static_positions

    @property
    def reference_positions(self) -> np.ndarray:
        """Positions used as mode-expansion reference (period average)."""
        return self.period_average

    def rescaled(self, units: UnitSystem) -> "IonCrystal":
        """Same crystal expressed in another unit system (lengths rescale)."""
        factor = self.unit_system.char_length / units.char_length
        return IonCrystal(
            n_ions=self.n_ions,
            unit_system=units,
            static_positions=None
            if self.static_positions is None
            else self.static_positions * factor,
            trajectory=None if self.trajectory is None else self.trajectory * factor,
            times=None if self.times is None else self.times.copy(),
            seed=self.seed,
            diagnostics=dict(self.diagnostics),
        )


def _min_pair_distance(positions: np.ndarray) -> float:
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    np.fill_diagonal(dist, np.inf)
    return float(dist.min())


def lattice_guess(
    trap: TrapParams, units: UnitSystem, seed: int = 0, jitter: float = 0.1
) -> np.ndarray:
    """Deterministic seeded starting configuration: a chain along the weakest
    axis with jittered coordinates (jitter scale in units of d)."""
    n = trap.n_ions
    theta = pseudo_frequencies(trap) / units.char_frequency
    weak = int(np.argmin(theta))
    gamma = theta[weak]
    # two-ion separation scaled down for larger crystals
    spacing = 2.0 * (0.25 / gamma**2) ** (1.0 / 3.0) / max(n, 2) ** 0.56
    pos = np.zeros((n, 3))
    pos[:, weak] = spacing * (np.arange(n) - (n - 1) / 2.0)
    rng = np.random.default_rng(seed)
    pos += jitter * rng.standard_normal((n, 3))
    return pos


def solve_pseudo_equilibrium(
    trap: TrapParams,
    units: UnitSystem,
    initial_guess: Optional[np.ndarray] = None,
    seed: int = 0,
    grad_tol: float = DEFAULT_GRAD_TOL,
    min_separation: float = DEFAULT_MIN_SEPARATION,
    max_steps: int = 2_000_000,
    dt: Optional[float] = None,
) -> IonCrystal:
    """Static equilibrium of the pseudopotential + Coulomb energy.

    Damped-dynamics relaxation (velocity Verlet with friction and an uphill
    velocity quench) brings an arbitrary guess near the minimum; a Newton
    polish then drives the gradient below ``grad_tol``.
    """
    theta = pseudo_frequencies(trap) / units.char_frequency
    theta_sq = theta**2
    n = trap.n_ions

    if initial_guess is None:
        x = lattice_guess(trap, units, seed=seed)
    else:
        x = np.array(initial_guess, dtype=float).reshape(n, 3)
        if _min_pair_distance(x) < min_separation:
            raise CollisionError("coincident ions in initial guess")

    def gradient(p):
        return theta_sq[None, :] * p + coulomb_gradient(p)

    def energy(p):
        return 0.5 * float(np.sum(theta_sq[None, :] * p**2)) + coulomb_energy(p)

    e0 = energy(x)

    if dt is None:
        dt = 0.1 / theta.max()
    friction = 2.0 * theta.min()
    v = np.zeros_like(x)
    g = gradient(x)
    pre_tol = max(1e-3 * grad_tol ** 0.5, 1e-8)
    for step in range(max_steps):
        if np.max(np.abs(g)) < pre_tol:
            break
        acc = -g - friction * v
        v_half = v + 0.5 * dt * acc
        x = x + dt * v_half
        g = gradient(x)
        v = (v_half - 0.5 * dt * g) / (1.0 + 0.5 * dt * friction)
        if np.sum(v * g) > 0.0:  # moving uphill: quench
            v[:] = 0.0
        if step % 200 == 0 and _min_pair_distance(x) < min_separation:
            raise CollisionError("ions collided during damped descent")
    else:
        raise ConvergenceError(
            f"damped descent did not reach pre-tolerance {pre_tol:g} "
            f"in {max_steps} steps"
        )

    # Newton polish
    for _ in range(100):
        g = gradient(x)
        if np.max(np.abs(g)) < grad_tol:
            break
        hess = coulomb_hessian(x) + np.diag(np.tile(theta_sq, n))
        evals = np.linalg.eigvalsh(hess)
        shift = max(0.0, -evals.min()) + (1e-12 if evals.min() <= 0 else 0.0)
        delta = np.linalg.solve(hess + shift * np.eye(3 * n), -g.ravel())
        x = x + delta.reshape(n, 3)
    else:
        raise ConvergenceError(f"Newton polish stalled above grad_tol={grad_tol:g}")

    if _min_pair_distance(x) < min_separation:
        raise CollisionError("ions collided during Newton polish")

    hess = coulomb_hessian(x) + np.diag(np.tile(theta_sq, n))
    evals = np.linalg.eigvalsh(hess)
    if evals.min() < -1e-8 * max(evals.max(), 1.0):
        raise ConvergenceError("converged to a saddle point, not a minimum")
    e1 = energy(x)
    if e1 > e0 + 1e-9 * max(abs(e0), 1.0):
        warnings.warn("relaxed energy exceeds the initial guess energy")

    return IonCrystal(
        n_ions=n,
        unit_system=units,
        static_positions=x,
        seed=seed,
        diagnostics={
            "grad_inf_norm": float(np.max(np.abs(gradient(x)))),
            "energy": e1,
            "min_eigenvalue": float(evals.min()),
        },
    )


# --- RF (full-drive) dynamics ------------------------------------------------


def _check_micromotion_units(trap: TrapParams, units: UnitSystem):
    ratio = trap.omega_rf / units.char_frequency
    if abs(ratio - 2.0) > 1e-9:
        raise ValueError(
            "RF solver requires char_frequency = omega_rf/2 "
            f"(got omega_rf/char_frequency = {ratio:g})"
        )


def _rf_coefficient(trap: TrapParams, t: float) -> np.ndarray:
    """Per-axis restoring coefficient a - 2 q cos(2t) in omega_rf/2 units."""
    return trap.a - 2.0 * trap.q * np.cos(2.0 * t)


def _rf_acceleration(x, t, trap, tweezer=None, velocity=None, friction=0.0):
    acc = -_rf_coefficient(trap, t)[None, :] * x - coulomb_gradient(x)
    if tweezer is not None:
        nu_sq, centers = tweezer
        acc = acc - nu_sq[:, None] * (x - centers) * np.array([0.0, 1.0, 1.0])
    if friction:
        acc = acc - friction * velocity
    return acc


def _rk4_step_with_stm(x, v, stm, t, dt, trap, tweezer):
    """One RK4 step of the state and its state-transition matrix."""
    n3 = x.size

    def rhs(xs, vs, stms, ts):
        ax = _rf_acceleration(xs, ts, trap, tweezer)
        # K(t, x): Coulomb Hessian + trap (+ tweezer) diagonal
        k = coulomb_hessian(xs)
        diag = np.tile(_rf_coefficient(trap, ts), x.shape[0])
        if tweezer is not None:
            nu_sq, _ = tweezer
            tw = np.zeros_like(diag)
            tw[1::3] = nu_sq
            tw[2::3] = nu_sq
            diag = diag + tw
        k[np.arange(n3), np.arange(n3)] += diag
        dstm_x = stms[n3:]
        dstm_v = -k @ stms[:n3]
        return vs, ax, np.vstack([dstm_x, dstm_v])

    k1 = rhs(x, v, stm, t)
    k2 = rhs(x + 0.5 * dt * k1[0], v + 0.5 * dt * k1[1], stm + 0.5 * dt * k1[2], t + 0.5 * dt)
    k3 = rhs(x + 0.5 * dt * k2[0], v + 0.5 * dt * k2[1], stm + 0.5 * dt * k2[2], t + 0.5 * dt)
    k4 = rhs(x + dt * k3[0], v + dt * k3[1], stm + dt * k3[2], t + dt)
    x1 = x + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    v1 = v + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    stm1 = stm + dt / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    return x1, v1, stm1


def _rk4_step(x, v, t, dt, trap, tweezer):
    def rhs(xs, vs, ts):
        return vs, _rf_acceleration(xs, ts, trap, tweezer)

    k1 = rhs(x, v, t)
    k2 = rhs(x + 0.5 * dt * k1[0], v + 0.5 * dt * k1[1], t + 0.5 * dt)
    k3 = rhs(x + 0.5 * dt * k2[0], v + 0.5 * dt * k2[1], t + 0.5 * dt)
    k4 = rhs(x + dt * k3[0], v + dt * k3[1], t + dt)
    x1 = x + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    v1 = v + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    return x1, v1


def _propagate_period(x, v, trap, tweezer, steps, with_stm=False, record=False):
    dt = np.pi / steps
    n3 = x.size
    stm = np.eye(2 * n3) if with_stm else None
    traj = [x.copy()] if record else None
    for s in range(steps):
        t = s * dt
        if with_stm:
            x, v, stm = _rk4_step_with_stm(x, v, stm, t, dt, trap, tweezer)
        else:
            x, v = _rk4_step(x, v, t, dt, trap, tweezer)
        if record:
            traj.append(x.copy())
    return x, v, stm, traj


def solve_rf_equilibrium(
    trap: TrapParams,
    units: UnitSystem,
    initial_guess: IonCrystal,
    cooling: Optional[CoolingSchedule] = None,
    steps_per_period: int = DEFAULT_STEPS_PER_PERIOD,
    periodicity_tol: float = DEFAULT_PERIODICITY_TOL,
    drift_tol: float = DEFAULT_DRIFT_TOL,
    min_separation: float = DEFAULT_MIN_SEPARATION,
    polish: bool = True,
    tweezer: Optional[tuple] = None,
) -> IonCrystal:
    """Time-periodic equilibrium orbit of the driven crystal.

    Damped equations of motion are integrated while the friction ramps to
    zero, after which (by default) a Newton-shooting iteration locks onto
    the periodic orbit of the undamped dynamics; one further period is then
    recorded as the trajectory.  ``tweezer`` optionally adds per-ion
    harmonic yz pinning as (nu_dimensionless_array, centers_Nx3).
    """
    _check_micromotion_units(trap, units)
    if cooling is None:
        cooling = CoolingSchedule()
    n = trap.n_ions
    guess = np.array(initial_guess.period_average, dtype=float).reshape(n, 3)
    if tweezer is not None:
        nu = np.asarray(tweezer[0], dtype=float)
        centers = np.asarray(tweezer[1], dtype=float).reshape(n, 3)
        tweezer = (nu**2, centers)

    # Stage 1: friction ramp (velocity Verlet, friction handled implicitly)
    x = guess.copy()
    v = np.zeros_like(x)
    dt = np.pi / steps_per_period
    t_max = cooling.n_periods * np.pi
    n_steps = cooling.n_periods * steps_per_period
    for s in range(n_steps):
        t = s * dt
        f0 = cooling.friction(t, t_max)
        f1 = cooling.friction(t + dt, t_max)
        acc = _rf_acceleration(x, t, trap, tweezer) - f0 * v
        v_half = v + 0.5 * dt * acc
        x = x + dt * v_half
        acc1 = _rf_acceleration(x, t + dt, trap, tweezer)
        v = (v_half + 0.5 * dt * acc1) / (1.0 + 0.5 * dt * f1)
        if s % (4 * steps_per_period) == 0 and _min_pair_distance(x) < min_separation:
            raise CollisionError("ions collided during RF cooling ramp")

    # Stage 2: Newton shooting on the period map
    shoot_iters = 0
    if polish:
        for shoot_iters in range(1, 26):
            x1, v1, stm, _ = _propagate_period(
                x, v, trap, tweezer, steps_per_period, with_stm=True
            )
            res = np.concatenate([(x1 - x).ravel(), (v1 - v).ravel()])
            if np.max(np.abs(res)) < 0.01 * periodicity_tol:
                break
            delta = np.linalg.solve(stm - np.eye(stm.shape[0]), -res)
            x = x + delta[: 3 * n].reshape(n, 3)
            v = v + delta[3 * n :].reshape(n, 3)
        else:
            raise ConvergenceError("Newton shooting failed to close the orbit")

    # Stage 3: record one period with friction off
    x_end, v_end, _, traj = _propagate_period(
        x, v, trap, tweezer, steps_per_period, record=True
    )
    closure = float(np.max(np.abs(x_end - x)))
    if closure > periodicity_tol:
        raise ConvergenceError(
            f"recorded orbit not periodic (closure {closure:.2e} > "
            f"{periodicity_tol:g}); increase cooling.n_periods or enable polish"
        )
    ke0 = 0.5 * float(np.sum(v**2))
    ke1 = 0.5 * float(np.sum(v_end**2))
    if abs(ke1 - ke0) > drift_tol * max(1.0, ke0):
        raise ConvergenceError(f"kinetic energy drift {abs(ke1 - ke0):.2e} over period")

    trajectory = np.array(traj)
    if np.any(
        np.linalg.norm(trajectory[:, :, None, :] - trajectory[:, None, :, :], axis=-1)[
            :, ~np.eye(n, dtype=bool)
        ]
        < min_separation
    ):
        raise CollisionError("ions closer than min_separation on recorded orbit")

    average = trajectory[:-1].mean(axis=0)
    spacing = _min_pair_distance(guess) if n > 1 else np.inf
    if n > 1 and np.max(np.linalg.norm(average - guess, axis=1)) > 0.5 * spacing:
        raise CrystalReorderError(
            "period-averaged positions far from the initial guess; "
            "crystal likely reordered (structural instability)"
        )

    times = np.linspace(0.0, np.pi, steps_per_period + 1)
    return IonCrystal(
        n_ions=n,
        unit_system=units,
        static_positions=initial_guess.static_positions,
        trajectory=trajectory,
        times=times,
        seed=initial_guess.seed,
        diagnostics={
            "closure": closure,
            "ke_drift": abs(ke1 - ke0),
            "shoot_iterations": shoot_iters,
            "cooling_periods": cooling.n_periods,
        },
    )


def micromotion_amplitude_first_order(
    crystal: IonCrystal, trap: TrapParams
) -> np.ndarray:
    """First-order micromotion amplitude (1/2) q_alpha * Rbar_{i,alpha}."""
    avg = crystal.period_average
    return 0.5 * np.abs(trap.q[None, :] * avg)
