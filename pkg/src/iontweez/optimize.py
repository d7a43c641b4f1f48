"""Simulated-annealing search for tweezer patterns matching a target coupling.

The objective rebuilds the mode structure with the candidate pinning
frequencies added to the Hessian diagonal (static re-diagonalization for
the pseudopotential backend, a monodromy re-solve for the Floquet backend),
evaluates the engineered coupling at the candidate beatnote and scores the
normalized Frobenius error, adding a large penalty for every mode inside
the virtual-phonon exclusion gap.

For a planar crystal driven with an in-plane wave vector the x block
decouples and is independent of the (yz-acting) tweezers, so the engines
re-solve only the 2N-dimensional yz block per evaluation and keep the
x-band frequencies cached for the gap check.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .coulomb import coulomb_hessian
from .coupling import CouplingMatrix, bessel_j0
from .equilibrium import ConvergenceError, IonCrystal
from .mathieu import characteristic_exponent
from .modes import monodromy_matrix
from .tweezers import (
    TweezerPattern,
    exact_stressed_equilibrium,
    static_yz_hessian,
    stress_displacement,
    stress_third_contraction,
    stressed_hessian,
    yz_trap_curvature,
)
from .units import TrapParams, pseudo_frequencies

PLANAR_TOL = 1e-9


@dataclass(frozen=True)
class OptimizationBounds:
    """Dimensionless search bounds and the virtual-phonon exclusion gap."""

    nu_max: float
    mu_min: float
    mu_max: float
    gap: float
    offset_max: float = 0.0

    def __post_init__(self):
        if not (0 < self.mu_min < self.mu_max):
            raise ValueError("need 0 < mu_min < mu_max")
        if self.nu_max <= 0 or self.gap <= 0 or self.offset_max < 0:
            raise ValueError("bounds must be positive")

    @staticmethod
    def from_si(
        units,
        nu_max_si: float = 2 * np.pi * 1.0e6,
        mu_min_si: float = 2 * np.pi * 0.3e6,
        mu_max_si: float = 2 * np.pi * 1.0e6,
        gap_si: float = 2 * np.pi * 10.0e3,
        offset_max_si: float = 0.25e-6,
    ) -> "OptimizationBounds":
        w = units.char_frequency
        return OptimizationBounds(
            nu_max=nu_max_si / w,
            mu_min=mu_min_si / w,
            mu_max=mu_max_si / w,
            gap=gap_si / w,
            offset_max=offset_max_si / units.char_length,
        )


class EvalOutcome(NamedTuple):
    eps: float
    gap_violations: int
    stable: bool


@dataclass
class OptimizationProblem:
    """Inputs of the tweezer-pattern search.

    ``drive_k`` is the dimensionless wave vector (magnitude k*d, which only
    matters when Doppler modulation is enabled).  ``crystal`` is the
    pseudopotential crystal; ``rf_crystal`` (with trajectory) is required
    for the Floquet backend and for Doppler factors under full motion.
    """

    target: CouplingMatrix
    drive_k: np.ndarray
    crystal: IonCrystal
    trap: TrapParams
    bounds: OptimizationBounds
    backend: str = "pseudopotential"
    rf_crystal: Optional[IonCrystal] = None
    doppler: bool = False
    symmetry: bool = False
    penalty: float = 1e3
    exact_gamma: bool = True
    rescale: bool = True
    floquet_steps: int = 512

    def __post_init__(self):
        self.drive_k = np.asarray(self.drive_k, dtype=float)
        if self.backend not in ("pseudopotential", "floquet"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.backend == "floquet" and self.rf_crystal is None:
            raise ValueError("floquet backend needs rf_crystal with a trajectory")
        if self.target.n_ions != self.trap.n_ions:
            raise ValueError("target size does not match ion count")
        self._engines = {}

    def engine(self, backend: Optional[str] = None):
        backend = backend or self.backend
        if backend not in self._engines:
            if backend == "pseudopotential":
                self._engines[backend] = _PseudoEngine(self)
            else:
                self._engines[backend] = _FloquetEngine(self)
        return self._engines[backend]


def _exact_gammas(trap: TrapParams) -> np.ndarray:
    return np.array([characteristic_exponent(a, q) for a, q in zip(trap.a, trap.q)])


def _doppler_factors(problem: OptimizationProblem, crystal: IonCrystal) -> np.ndarray:
    beta = 0.5 * np.abs(crystal.period_average @ (problem.drive_k * problem.trap.q))
    return bessel_j0(beta)


class _ErrorScorer:
    """Precomputed pieces of the normalized Frobenius error."""

    def __init__(self, target: np.ndarray, rescale: bool):
        self.jt = target
        self.norm_t = np.linalg.norm(target)
        if self.norm_t == 0:
            raise ValueError("target matrix has zero norm")
        self.rescale = rescale

    def __call__(self, je: np.ndarray) -> float:
        if self.rescale:
            denom = float(np.sum(je * je))
            s = float(np.sum(self.jt * je)) / denom if denom > 0 else 0.0
        else:
            s = 1.0
        return float(np.linalg.norm(self.jt - s * je)) / self.norm_t


def _coupling_from_projections(proj, freqs, mu, doppler_factors):
    j = (proj / (mu**2 - freqs**2)[None, :]) @ proj.T
    np.fill_diagonal(j, 0.0)
    if doppler_factors is not None:
        j = doppler_factors[:, None] * j * doppler_factors[None, :]
    return j


class _PseudoEngine:
    """Static-Hessian objective backend."""

    def __init__(self, problem: OptimizationProblem):
        self.problem = problem
        trap = problem.trap
        crystal = problem.crystal
        units = crystal.unit_system
        n = trap.n_ions
        self.n = n
        pos = crystal.static_positions
        if pos is None:
            raise ValueError("pseudopotential backend needs static positions")
        if problem.exact_gamma:
            theta = 0.5 * trap.omega_rf * _exact_gammas(trap) / units.char_frequency
        else:
            theta = pseudo_frequencies(trap) / units.char_frequency
        self.scorer = _ErrorScorer(problem.target.j, problem.rescale)
        self.doppler = (
            _doppler_factors(problem, crystal) if problem.doppler else None
        )
        k = problem.drive_k
        planar = np.max(np.abs(pos[:, 0] - pos[0, 0])) < PLANAR_TOL
        self.fast_yz = planar and abs(k[0]) < 1e-15
        if self.fast_yz:
            self.base = static_yz_hessian(pos[:, 1:], theta[1:] ** 2)
            full = coulomb_hessian(pos)
            x_block = full[0::3, 0::3] + theta[0] ** 2 * np.eye(n)
            x_evals = np.linalg.eigvalsh(x_block)
            self.x_band = np.sqrt(np.abs(x_evals)) * np.where(x_evals > 0, 1, -1)
            self.k_active = k[1:]
            self.ndim = 2
        else:
            full = coulomb_hessian(pos) + np.diag(np.tile(theta**2, n))
            self.base = full
            self.x_band = np.empty(0)
            self.k_active = k
            self.ndim = 3

    def _nu_diagonal(self, nu: np.ndarray) -> np.ndarray:
        if self.ndim == 2:
            return np.repeat(nu**2, 2)
        add = np.zeros(3 * self.n)
        add[1::3] = nu**2
        add[2::3] = nu**2
        return add

    def evaluate(self, nu: np.ndarray, mu: float) -> EvalOutcome:
        h = self.base + np.diag(self._nu_diagonal(nu))
        evals, evecs = np.linalg.eigh(h)
        if evals[0] <= 0 or np.any(self.x_band <= 0):
            return EvalOutcome(np.inf, 0, False)
        freqs = np.sqrt(evals)
        gap = self.problem.bounds.gap
        violations = int(np.sum(np.abs(mu - freqs) < gap))
        violations += int(np.sum(np.abs(mu - self.x_band) < gap))
        proj = np.tensordot(
            self.k_active, evecs.reshape(self.n, self.ndim, -1), axes=(0, 1)
        )
        j = _coupling_from_projections(proj, freqs, mu, self.doppler)
        return EvalOutcome(self.scorer(j), violations, True)


class _FloquetEngine:
    """Monodromy-resolve objective backend (cached equilibrium trajectory)."""

    def __init__(self, problem: OptimizationProblem):
        from .modes import fourier_hessian

        self.problem = problem
        trap = problem.trap
        crystal = problem.rf_crystal
        if crystal is None or crystal.trajectory is None:
            raise ValueError("floquet backend needs an rf crystal with trajectory")
        n = trap.n_ions
        self.n = n
        hs = fourier_hessian(crystal)
        a_full = np.diag(np.tile(trap.a, n)) + hs.d0
        q_full = np.diag(np.tile(trap.q, n)) + hs.d2
        self.scorer = _ErrorScorer(problem.target.j, problem.rescale)
        self.doppler = (
            _doppler_factors(problem, crystal) if problem.doppler else None
        )
        k = problem.drive_k
        pos = crystal.period_average
        planar = np.max(np.abs(pos[:, 0] - pos[0, 0])) < PLANAR_TOL
        x_idx = np.arange(0, 3 * n, 3)
        yz_idx = np.sort(np.concatenate([x_idx + 1, x_idx + 2]))
        self.fast_yz = planar and abs(k[0]) < 1e-15
        self.steps = problem.floquet_steps
        if self.fast_yz:
            self.a_mat = a_full[np.ix_(yz_idx, yz_idx)]
            self.q_mat = q_full[np.ix_(yz_idx, yz_idx)]
            gx, _, unstable, _ = _floquet_block_modes(
                a_full[np.ix_(x_idx, x_idx)],
                q_full[np.ix_(x_idx, x_idx)],
                self.steps,
            )
            if unstable:
                raise ConvergenceError("x band parametrically unstable")
            self.x_band = gx
            self.k_active = k[1:]
            self.ndim = 2
        else:
            self.a_mat = a_full
            self.q_mat = q_full
            self.x_band = np.empty(0)
            self.k_active = k
            self.ndim = 3

    def evaluate(self, nu: np.ndarray, mu: float) -> EvalOutcome:
        add = (
            np.repeat(nu**2, 2)
            if self.ndim == 2
            else np.repeat(nu**2, 3) * np.tile([0.0, 1.0, 1.0], self.n)
        )
        a_mat = self.a_mat + np.diag(add)
        freqs, vecs, unstable, _ = _floquet_block_modes(a_mat, self.q_mat, self.steps)
        if unstable or np.any(freqs <= 0):
            return EvalOutcome(np.inf, 0, False)
        gap = self.problem.bounds.gap
        violations = int(np.sum(np.abs(mu - freqs) < gap))
        violations += int(np.sum(np.abs(mu - self.x_band) < gap))
        proj = np.tensordot(
            self.k_active, vecs.reshape(self.n, self.ndim, -1), axes=(0, 1)
        )
        j = _coupling_from_projections(proj, freqs, mu, self.doppler)
        return EvalOutcome(self.scorer(j), violations, True)


def _floquet_block_modes(a_mat, q_mat, steps, stability_tol=1e-4):
    """Exponents and extracted real mode vectors of one decoupled block."""
    n = a_mat.shape[0]
    m = monodromy_matrix(a_mat, q_mat, steps)
    evals, evecs = np.linalg.eig(m)
    order = np.argsort(-evals.imag)[:n]
    lam = evals[order]
    unstable = bool(np.any(np.abs(np.abs(lam) - 1.0) > stability_tol) or np.any(
        lam.imag <= 0
    ))
    gammas = np.angle(lam) / np.pi
    u = evecs[:n, order]
    jmax = np.argmax(np.abs(u), axis=0)
    phase = np.exp(-1j * np.angle(u[jmax, np.arange(n)]))
    b = np.real(u * phase[None, :])
    norms = np.linalg.norm(b, axis=0)
    norms[norms == 0] = 1.0
    b = b / norms[None, :]
    srt = np.argsort(gammas)
    return gammas[srt], b[:, srt], unstable, m


# --- simulated annealing -----------------------------------------------------


@dataclass
class AnnealSchedule:
    """Move and temperature schedule of the annealer.

    Single-parameter moves: with probability ``uniform_prob`` the chosen
    parameter is redrawn uniformly from its range (basin hopping), else it
    takes a Gaussian step of ``step_fraction`` of the range, shrunk with
    temperature when ``anneal_steps`` is set and reflected at the bounds.
    Temperature decays geometrically from t_start to t_end.
    """

    budget: int = 30000
    t_start: float = 0.1
    t_end: float = 1e-5
    step_fraction: float = 0.15
    uniform_prob: float = 0.1
    anneal_steps: bool = True
    restarts: int = 4


@dataclass
class AnnealResult:
    best_nu: np.ndarray
    best_mu: float
    best_epsilon: float
    trace: np.ndarray  # best-so-far objective per evaluation (winning chain)
    seed: int
    evaluations: int
    backend: str
    best_offsets: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)


def _mirror_slots(positions: np.ndarray) -> np.ndarray:
    """Slot index per ion tying z-mirror partners together."""
    n = positions.shape[0]
    order = np.argsort(positions[:, 2], kind="stable")
    slots = np.empty(n, dtype=int)
    for rank, ion in enumerate(order):
        slots[ion] = min(rank, n - 1 - rank)
    return slots


def _reflect(value: float, lo: float, hi: float) -> float:
    width = hi - lo
    if width <= 0:
        return lo
    excess = (value - lo) % (2.0 * width)
    return lo + (excess if excess <= width else 2.0 * width - excess)


def objective(params: np.ndarray, problem: OptimizationProblem) -> float:
    """Penalized error for a parameter vector [nu_0..nu_{N-1}, mu]."""
    params = np.asarray(params, dtype=float)
    n = problem.trap.n_ions
    nu = np.clip(params[:n], 0.0, problem.bounds.nu_max)
    mu = float(np.clip(params[n], problem.bounds.mu_min, problem.bounds.mu_max))
    outcome = problem.engine().evaluate(nu, mu)
    if not outcome.stable:
        return np.inf
    return outcome.eps + problem.penalty * outcome.gap_violations


def simulated_annealing(
    problem: OptimizationProblem,
    schedule: Optional[AnnealSchedule] = None,
    seed: int = 0,
) -> AnnealResult:
    """Best-of-restarts annealing over per-ion pinning and the beatnote.

    Deterministic for fixed (problem, schedule, seed): restart chains draw
    from independent child streams of the seed.
    """
    if schedule is None:
        schedule = AnnealSchedule()
    n = problem.trap.n_ions
    engine = problem.engine()
    bounds = problem.bounds
    slots = (
        _mirror_slots(problem.crystal.period_average)
        if problem.symmetry
        else np.arange(n)
    )
    n_slots = int(slots.max()) + 1
    lo = np.concatenate([np.zeros(n_slots), [bounds.mu_min]])
    hi = np.concatenate([np.full(n_slots, bounds.nu_max), [bounds.mu_max]])
    sigma = schedule.step_fraction * (hi - lo)

    def expand(vec):
        return vec[slots]

    def evaluate(vec):
        outcome = engine.evaluate(expand(vec[:-1]), float(vec[-1]))
        if not outcome.stable:
            return np.inf
        return outcome.eps + problem.penalty * outcome.gap_violations

    master = np.random.SeedSequence(seed)
    children = master.spawn(schedule.restarts)
    best_chain = None
    finals = []
    total_evals = 0
    for chain_idx, child in enumerate(children):
        rng = np.random.default_rng(child)
        x = rng.uniform(lo, hi)
        f = evaluate(x)
        total_evals += 1
        best_x, best_f = x.copy(), f
        trace = np.empty(schedule.budget)
        denom = max(schedule.budget - 1, 1)
        for i in range(schedule.budget):
            temp = schedule.t_start * (schedule.t_end / schedule.t_start) ** (
                i / denom
            )
            j = int(rng.integers(len(x)))
            prop = x.copy()
            if rng.random() < schedule.uniform_prob:
                prop[j] = rng.uniform(lo[j], hi[j])
            else:
                step = sigma[j]
                if schedule.anneal_steps:
                    step *= max(temp / schedule.t_start, 0.05) ** 0.5
                prop[j] = _reflect(prop[j] + rng.normal(0.0, step), lo[j], hi[j])
            fp = evaluate(prop)
            total_evals += 1
            if fp <= f or rng.random() < np.exp(-(fp - f) / temp):
                x, f = prop, fp
            if f < best_f:
                best_x, best_f = x.copy(), f
            trace[i] = best_f
        finals.append(best_f)
        if best_chain is None or best_f < best_chain[1]:
            best_chain = (best_x, best_f, trace, chain_idx)

    best_x, best_f, trace, chain_idx = best_chain
    nu = expand(best_x[:-1])
    mu = float(best_x[-1])
    check = evaluate(best_x)
    return AnnealResult(
        best_nu=nu,
        best_mu=mu,
        best_epsilon=float(check),
        trace=trace,
        seed=seed,
        evaluations=total_evals,
        backend=problem.backend,
        diagnostics={
            "restart_finals": finals,
            "winning_chain": chain_idx,
            "schedule": {
                "budget": schedule.budget,
                "t_start": schedule.t_start,
                "t_end": schedule.t_end,
                "step_fraction": schedule.step_fraction,
                "uniform_prob": schedule.uniform_prob,
                "anneal_steps": schedule.anneal_steps,
                "restarts": schedule.restarts,
            },
            "symmetry": bool(problem.symmetry),
        },
    )


def naive_micromotion_rescore(
    pseudo_result: AnnealResult, problem: OptimizationProblem
) -> float:
    """Error of a pseudopotential-optimized pattern under the full-motion
    mode structure (same nu and mu, Floquet backend, no penalty terms)."""
    engine = problem.engine("floquet")
    outcome = engine.evaluate(pseudo_result.best_nu, pseudo_result.best_mu)
    if not outcome.stable:
        return np.inf
    return outcome.eps


# --- tweezer-offset (local stress) optimization ------------------------------


class _StressEngine:
    """Objective over tweezer offsets at a fixed (nu, mu) pattern.

    Exact evaluations re-equilibrate the crystal nonlinearly; the screening
    evaluations use the first-order displacement and Hessian expansion.
    """

    def __init__(self, pattern: TweezerPattern, problem: OptimizationProblem):
        self.problem = problem
        self.pattern = pattern
        trap = problem.trap
        crystal = problem.crystal
        n = trap.n_ions
        self.n = n
        self.crystal = crystal
        pos = crystal.static_positions
        if pos is None:
            raise ValueError("offset optimization runs in the pseudopotential regime")
        if np.max(np.abs(pos[:, 0] - pos[0, 0])) > PLANAR_TOL:
            raise ValueError("offset optimization expects a planar (yz) crystal")
        if abs(problem.drive_k[0]) > 1e-15:
            raise ValueError("offset optimization expects an in-plane wave vector")
        theta_sq = yz_trap_curvature(
            trap, crystal.unit_system, problem.exact_gamma
        )
        self.pos_yz = pos[:, 1:]
        self.base = static_yz_hessian(self.pos_yz, theta_sq)
        self.d_tot0 = self.base + np.diag(np.repeat(pattern.nu**2, 2))
        theta_x = (
            0.5
            * trap.omega_rf
            * (
                _exact_gammas(trap)[0]
                if problem.exact_gamma
                else np.sqrt(trap.a[0] + trap.q[0] ** 2 / 2)
            )
            / crystal.unit_system.char_frequency
        )
        x_block = coulomb_hessian(pos)[0::3, 0::3] + theta_x**2 * np.eye(n)
        x_evals = np.linalg.eigvalsh(x_block)
        self.x_band = np.sqrt(np.abs(x_evals))
        self.scorer = _ErrorScorer(problem.target.j, problem.rescale)
        self.k_yz = problem.drive_k[1:]
        self.doppler = (
            _doppler_factors(problem, crystal) if problem.doppler else None
        )

    def _score_hessian(self, hess: np.ndarray, mu: float) -> float:
        evals, evecs = np.linalg.eigh(hess)
        if evals[0] <= 0:
            return np.inf
        freqs = np.sqrt(evals)
        gap = self.problem.bounds.gap
        violations = int(np.sum(np.abs(mu - freqs) < gap))
        violations += int(np.sum(np.abs(mu - self.x_band) < gap))
        proj = np.tensordot(self.k_yz, evecs.reshape(self.n, 2, -1), axes=(0, 1))
        j = _coupling_from_projections(proj, freqs, mu, self.doppler)
        return self.scorer(j) + self.problem.penalty * violations

    def first_order(self, offsets: np.ndarray, mu: float) -> float:
        pattern = self.pattern.with_offsets(offsets)
        rho = stress_displacement(self.d_tot0, pattern)
        contraction = stress_third_contraction(self.pos_yz, rho)
        return self._score_hessian(stressed_hessian(self.d_tot0, contraction), mu)

    def exact(self, offsets: np.ndarray, mu: float) -> float:
        pattern = self.pattern.with_offsets(offsets)
        try:
            _, hess = exact_stressed_equilibrium(
                self.crystal,
                self.problem.trap,
                pattern,
                exact_gamma=self.problem.exact_gamma,
            )
        except ConvergenceError:
            return np.inf
        return self._score_hessian(hess, mu)


def optimize_offsets(
    fixed_pattern: TweezerPattern,
    problem: OptimizationProblem,
    mu: float,
    schedule: Optional[AnnealSchedule] = None,
    seed: int = 0,
    use_two_step: bool = True,
    screen_factor: float = 1.2,
) -> AnnealResult:
    """Anneal the 2N tweezer offsets with the pinning pattern held fixed.

    The chain starts at zero offsets, so the result can only improve on the
    offset-free error.  With ``use_two_step`` each proposal is screened with
    the first-order stress expansion and re-evaluated exactly only when it
    lands within ``screen_factor`` of the best exact error so far.
    """
    if schedule is None:
        schedule = AnnealSchedule(budget=2000, restarts=1)
    engine = _StressEngine(fixed_pattern, problem)
    n = fixed_pattern.n_ions
    bound = problem.bounds.offset_max
    if bound <= 0:
        raise ValueError("offset_max bound must be positive for offset optimization")

    def evaluate_exact(off):
        return engine.exact(off.reshape(n, 2), mu)

    def evaluate_screen(off):
        return engine.first_order(off.reshape(n, 2), mu)

    master = np.random.SeedSequence(seed)
    children = master.spawn(schedule.restarts)
    best_chain = None
    finals = []
    total_evals = 0
    exact_evals = 0
    for chain_idx, child in enumerate(children):
        rng = np.random.default_rng(child)
        x = np.zeros(2 * n)
        f = evaluate_exact(x)
        total_evals += 1
        exact_evals += 1
        best_x, best_f = x.copy(), f
        sigma = schedule.step_fraction * 2.0 * bound
        trace = np.empty(schedule.budget)
        denom = max(schedule.budget - 1, 1)
        for i in range(schedule.budget):
            temp = schedule.t_start * (schedule.t_end / schedule.t_start) ** (
                i / denom
            )
            jdx = int(rng.integers(2 * n))
            prop = x.copy()
            if rng.random() < schedule.uniform_prob:
                prop[jdx] = rng.uniform(-bound, bound)
            else:
                step = sigma
                if schedule.anneal_steps:
                    step *= max(temp / schedule.t_start, 0.05) ** 0.5
                prop[jdx] = _reflect(prop[jdx] + rng.normal(0.0, step), -bound, bound)
            total_evals += 1
            if use_two_step:
                fp = evaluate_screen(prop)
                if fp < screen_factor * best_f:
                    fp = evaluate_exact(prop)
                    exact_evals += 1
                    if fp < best_f:
                        best_x, best_f = prop.copy(), fp
            else:
                fp = evaluate_exact(prop)
                exact_evals += 1
                if fp < best_f:
                    best_x, best_f = prop.copy(), fp
            if fp <= f or rng.random() < np.exp(-(fp - f) / temp):
                x, f = prop, fp
            trace[i] = best_f
        finals.append(best_f)
        if best_chain is None or best_f < best_chain[1]:
            best_chain = (best_x, best_f, trace, chain_idx)

    best_x, best_f, trace, chain_idx = best_chain
    check = evaluate_exact(best_x)
    return AnnealResult(
        best_nu=fixed_pattern.nu.copy(),
        best_mu=mu,
        best_epsilon=float(check),
        trace=trace,
        seed=seed,
        evaluations=total_evals,
        backend="pseudopotential",
        best_offsets=best_x.reshape(n, 2),
        diagnostics={
            "restart_finals": finals,
            "winning_chain": chain_idx,
            "exact_evaluations": exact_evals,
            "two_step": use_two_step,
            "screen_factor": screen_factor,
        },
    )
