"""Characteristic exponent of the Mathieu equation via continued fractions.

For y'' + [a - 2 q cos(2t)] y = 0 the stable solutions are
y = sum_n c_{2n} exp(i (nu + 2n) t).  Substituting gives the three-term
recursion G_n c_{2n} = c_{2n+2} + c_{2n-2} with
G_n = (a - (nu + 2n)^2)/q, whose decaying-tail solutions define the
continued fractions h+ and h-.  The exponent nu solves

    G_0(nu) = h+(nu) + h-(nu).

This route is independent of the monodromy integration used by the Floquet
mode solver and serves as its cross-check.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import brentq


def _tail_fraction(a: float, q: float, nu: float, sign: int, depth: int) -> float:
    """h_1 = c_{±2}/c_0 by backward recurrence h_n = 1/(G_{±n} - h_{n+1})."""
    h = 0.0
    for n in range(depth, 0, -1):
        g = (a - (nu + sign * 2 * n) ** 2) / q
        denom = g - h
        if denom == 0.0:
            denom = np.finfo(float).tiny
        h = 1.0 / denom
    return h


def _characteristic_residual(nu: float, a: float, q: float, depth: int) -> float:
    g0 = (a - nu**2) / q
    return g0 - _tail_fraction(a, q, nu, +1, depth) - _tail_fraction(a, q, nu, -1, depth)


def characteristic_exponent(a: float, q: float, depth: int = 60) -> float:
    """Mathieu characteristic exponent nu in (0, 1) for a stable (a, q).

    For q = 0 returns sqrt(a) exactly.  Raises ValueError when no real
    exponent exists in (0, 1) near the lowest-order estimate (unstable or
    out-of-range parameters).
    """
    if a <= 0 and q == 0:
        raise ValueError("no confinement: a <= 0 with q = 0")
    if q == 0:
        nu = np.sqrt(a)
        if not 0 < nu < 1:
            raise ValueError(f"exponent {nu} outside the principal interval (0, 1)")
        return float(nu)

    q = float(q)
    est_sq = a + q**2 / 2.0
    guess = np.sqrt(est_sq) if est_sq > 0 else 0.05

    # Bracket the root near the lowest-order estimate, widening gradually.
    f = lambda nu: _characteristic_residual(nu, a, q, depth)
    for half_width in (0.05, 0.1, 0.2, 0.4, 0.8):
        lo = max(guess - half_width, 1e-12)
        hi = min(guess + half_width, 1.0 - 1e-12)
        grid = np.linspace(lo, hi, 81)
        vals = np.array([f(nu) for nu in grid])
        sign_change = np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0)
        if sign_change.size:
            # Pick the sign change closest to the estimate; poles of the
            # continued fraction also flip signs, so verify the residual is
            # small at the bracketing root before accepting.
            order = np.argsort(np.abs(grid[sign_change] - guess))
            for k in order:
                i = sign_change[k]
                root = brentq(f, grid[i], grid[i + 1], xtol=1e-15, rtol=8.9e-16)
                if abs(f(root)) < 1e-6:
                    return float(root)
    raise ValueError(f"no stable characteristic exponent found for a={a}, q={q}")
