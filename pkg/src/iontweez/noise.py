"""Monte-Carlo propagation of shot-to-shot tweezer intensity noise.

Each draw multiplies the tweezer powers by independent Gaussian factors
(1 + delta_i) with standard deviation delta_p, so the pinning frequencies
scale as sqrt(max(0, 1 + delta_i)); negative power draws are clamped to
zero and counted.  The engineered coupling error is recomputed per draw
with the pseudopotential backend and averaged.  Draw streams are derived
from the study seed per (grid point, draw), so results are independent of
evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .optimize import OptimizationProblem
from .tweezers import TweezerPattern


@dataclass
class NoiseStudy:
    """Noise-sweep definition around an optimized pattern."""

    base_pattern: TweezerPattern
    mu: float  # dimensionless beatnote, held fixed
    delta_p_grid: list
    n_repeat: int = 10000
    seed: int = 0
    mode: str = "power"  # "power": nu*sqrt(1+delta); "frequency": nu*(1+delta)

    def __post_init__(self):
        if self.n_repeat < 1:
            raise ValueError("n_repeat must be >= 1")
        if any(dp < 0 for dp in self.delta_p_grid):
            raise ValueError("delta_p values must be >= 0")
        if self.mode not in ("power", "frequency"):
            raise ValueError(f"unknown noise mode {self.mode!r}")


@dataclass
class NoisePoint:
    delta_p: float
    mean_eps: float
    stderr: float
    clamp_count: int
    penalized_draws: int
    eps_samples: Optional[np.ndarray] = None


@dataclass
class NoiseResults:
    points: list = field(default_factory=list)

    def as_arrays(self):
        dp = np.array([p.delta_p for p in self.points])
        mean = np.array([p.mean_eps for p in self.points])
        se = np.array([p.stderr for p in self.points])
        return dp, mean, se


def perturb_pattern(
    pattern: TweezerPattern, delta_p: float, rng: np.random.Generator, mode="power"
):
    """One noisy realization of the pattern; returns (pattern, clamp_count)."""
    if delta_p < 0:
        raise ValueError("delta_p must be >= 0")
    delta = rng.normal(0.0, delta_p, size=pattern.n_ions)
    if mode == "power":
        factor_sq = 1.0 + delta
        clamps = int(np.sum(factor_sq < 0))
        nu = pattern.nu * np.sqrt(np.maximum(factor_sq, 0.0))
    else:
        factor = 1.0 + delta
        clamps = int(np.sum(factor < 0))
        nu = pattern.nu * np.maximum(factor, 0.0)
    noisy = TweezerPattern(
        nu=nu,
        unit_system=pattern.unit_system,
        offsets=pattern.offsets.copy(),
        waist=pattern.waist,
        max_nu=np.inf,  # physical draws may exceed the optimization bound
        max_offset=pattern.max_offset,
    )
    return noisy, clamps


def noise_sweep(
    study: NoiseStudy,
    problem: OptimizationProblem,
    keep_samples: bool = False,
) -> NoiseResults:
    """Mean coupling error over noisy pattern draws, per delta_p grid point.

    Unstable or gap-violating draws take the penalized objective value and
    are counted separately.  delta_p = 0 reproduces the noiseless error
    with zero standard error.
    """
    engine = problem.engine("pseudopotential")
    results = NoiseResults()
    for gi, delta_p in enumerate(study.delta_p_grid):
        eps = np.empty(study.n_repeat)
        clamps = 0
        penalized = 0
        for draw in range(study.n_repeat):
            rng = np.random.default_rng(
                np.random.SeedSequence(study.seed, spawn_key=(gi, draw))
            )
            noisy, c = perturb_pattern(study.base_pattern, delta_p, rng, study.mode)
            clamps += c
            outcome = engine.evaluate(noisy.nu, study.mu)
            if not outcome.stable:
                eps[draw] = problem.penalty
                penalized += 1
            else:
                eps[draw] = outcome.eps + problem.penalty * outcome.gap_violations
                if outcome.gap_violations:
                    penalized += 1
        mean = float(eps.mean())
        stderr = float(eps.std(ddof=1) / np.sqrt(study.n_repeat)) if study.n_repeat > 1 else 0.0
        results.points.append(
            NoisePoint(
                delta_p=float(delta_p),
                mean_eps=mean,
                stderr=stderr,
                clamp_count=clamps,
                penalized_draws=penalized,
                eps_samples=eps.copy() if keep_samples else None,
            )
        )
    return results
