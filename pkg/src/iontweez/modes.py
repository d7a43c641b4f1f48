"""Normal modes of the crystal: static diagonalization and Floquet analysis.

The static path diagonalizes the pseudopotential Hessian.  The full path
expands the time-dependent Coulomb Hessian along the periodic orbit in a
Fourier series D(t) ~ D0 - 2 D2 cos(2t), builds the linearized first-order
system in 6N-dimensional phase space and extracts mode frequencies and
vectors from the monodromy matrix.  All frequencies are dimensionless in
the crystal's unit system (omega_rf/2 for the Floquet path).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .coulomb import coulomb_hessian
from .equilibrium import IonCrystal
from .units import TrapParams, UnitSystem, pseudo_frequencies

STABILITY_TOL = 1e-4
SYMPLECTIC_TOL = 1e-8
DEFAULT_FLOQUET_STEPS = 1024
_COM_OVERLAP = 0.99


class ResonanceError(ValueError):
    """Drive frequency coincides with a mode frequency."""


@dataclass
class HessianSet:
    """Fourier pieces of the linearization about an equilibrium.

    d0 and d2 are the DC and cos(2t) Fourier coefficients of the non-trap
    (Coulomb + tweezer) Hessian, normalized as D(t) ~ d0 - 2 d2 cos(2t).
    static_full is the total static Hessian (trap included) used by the
    pseudopotential path.  residual is the max norm of the discarded higher
    Fourier terms.
    """

    n_ions: int
    d0: np.ndarray
    d2: np.ndarray
    residual: float = 0.0
    static_full: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("d0", "d2", "static_full"):
            m = getattr(self, name)
            if m is not None and np.max(np.abs(m - m.T)) > 1e-12:
                raise ValueError(f"{name} not symmetric")

    def with_tweezers(self, nu: np.ndarray) -> "HessianSet":
        """Add per-ion pinning nu_i^2 to the y,z diagonal (cylindrical tweezers)."""
        nu = np.asarray(nu, dtype=float)
        if nu.shape != (self.n_ions,):
            raise ValueError(f"need {self.n_ions} pinning frequencies")
        add = np.zeros(3 * self.n_ions)
        add[1::3] = nu**2
        add[2::3] = nu**2
        d0 = self.d0 + np.diag(add)
        static = None if self.static_full is None else self.static_full + np.diag(add)
        return HessianSet(self.n_ions, d0, self.d2.copy(), self.residual, static)


@dataclass
class ModeStructure:
    """Mode frequencies (ascending, dimensionless) and mass-normalized vectors.

    Column m of ``modes`` is the eigenvector b_m; element (3i + alpha, m) is
    the alpha-component on ion i.  ``provenance`` records which treatment
    produced the modes.
    """

    frequencies: np.ndarray
    modes: np.ndarray
    provenance: str  # "pseudopotential" | "floquet"
    n_ions: int
    labels: list = field(default_factory=list)
    com_flags: np.ndarray = None
    stable: bool = True
    unstable_modes: list = field(default_factory=list)
    unit_system: Optional[UnitSystem] = None
    diagnostics: dict = field(default_factory=dict)

    def frequencies_si(self) -> np.ndarray:
        if self.unit_system is None:
            raise ValueError("no unit system attached")
        return self.frequencies * self.unit_system.char_frequency

    def ion_vector(self, m: int) -> np.ndarray:
        """Mode m reshaped to (n_ions, 3)."""
        return self.modes[:, m].reshape(self.n_ions, 3)


def _label_modes(modes: np.ndarray, n_ions: int):
    """Classify columns as in-plane (yz) or out-of-plane (x), flag com modes."""
    labels = []
    com = np.zeros(modes.shape[1], dtype=bool)
    uniform = np.zeros((3 * n_ions, 3))
    for axis in range(3):
        uniform[axis::3, axis] = 1.0 / np.sqrt(n_ions)
    for m in range(modes.shape[1]):
        b = modes[:, m]
        x_weight = float(np.sum(b[0::3] ** 2))
        labels.append("out_of_plane" if x_weight > 0.5 else "in_plane")
        if np.max(np.abs(uniform.T @ b)) > _COM_OVERLAP:
            com[m] = True
    return labels, com


def static_hessian(
    crystal: IonCrystal, trap: TrapParams, exact_gamma: bool = False
) -> HessianSet:
    """Total static Hessian at the pseudopotential equilibrium.

    The trap enters as the diagonal Theta_alpha^2 in the crystal's units;
    d0 holds the bare Coulomb part so tweezers can be layered on top.
    With ``exact_gamma`` the trap curvature uses the exact single-ion
    Mathieu exponents instead of sqrt(a + q^2/2); this makes com modes
    coincide with the full-motion treatment, which is the convention behind
    the quoted trap frequencies and the mode-shift comparison.
    """
    if crystal.static_positions is None:
        raise ValueError("crystal has no static positions")
    n = crystal.n_ions
    if exact_gamma:
        from .mathieu import characteristic_exponent

        gamma = np.array(
            [characteristic_exponent(a, q) for a, q in zip(trap.a, trap.q)]
        )
        theta = 0.5 * trap.omega_rf * gamma / crystal.unit_system.char_frequency
    else:
        theta = pseudo_frequencies(trap) / crystal.unit_system.char_frequency
    dc = coulomb_hessian(crystal.static_positions)
    full = dc + np.diag(np.tile(theta**2, n))
    return HessianSet(n, d0=dc, d2=np.zeros_like(dc), residual=0.0, static_full=full)


def fourier_hessian(crystal: IonCrystal) -> HessianSet:
    """Fourier split of the Coulomb Hessian along the periodic orbit.

    Requires a trajectory sampled uniformly over exactly one period.  The
    residual of the two-term truncation D0 - 2 D2 cos(2t) is reported and a
    warning raised when it exceeds 1e-3 of |D0|.
    """
    if crystal.trajectory is None:
        raise ValueError("crystal has no trajectory; run the RF solver first")
    times = crystal.times
    steps = np.diff(times)
    if np.max(np.abs(steps - steps[0])) > 1e-12 * steps[0]:
        raise ValueError("trajectory time grid is not uniform")
    samples = crystal.trajectory[:-1]  # endpoint duplicates t=0
    t = times[:-1]
    n_samp = samples.shape[0]
    hessians = np.array([coulomb_hessian(p) for p in samples])
    d0 = hessians.mean(axis=0)
    cos2 = np.cos(2.0 * t)
    c2 = 2.0 / n_samp * np.tensordot(cos2, hessians, axes=(0, 0))
    d2 = -0.5 * c2
    recon = d0[None] - 2.0 * d2[None] * cos2[:, None, None]
    residual = float(np.max(np.abs(hessians - recon)))
    scale = float(np.max(np.abs(d0)))
    if residual > 1e-3 * scale:
        warnings.warn(
            f"discarded Fourier terms of the Hessian are large "
            f"(residual {residual:.3e} vs |D0| {scale:.3e})"
        )
    return HessianSet(crystal.n_ions, d0=d0, d2=d2, residual=residual)


def pseudo_modes(
    hessians: HessianSet,
    units: Optional[UnitSystem] = None,
) -> ModeStructure:
    """Diagonalize the static Hessian; frequencies are sqrt of eigenvalues."""
    if hessians.static_full is None:
        raise ValueError("HessianSet has no static_full (built from a trajectory?)")
    evals, evecs = np.linalg.eigh(hessians.static_full)
    unstable = [int(m) for m in np.flatnonzero(evals <= 0)]
    freqs = np.sqrt(np.abs(evals)) * np.where(evals > 0, 1.0, -1.0)
    labels, com = _label_modes(evecs, hessians.n_ions)
    return ModeStructure(
        frequencies=freqs,
        modes=evecs,
        provenance="pseudopotential",
        n_ions=hessians.n_ions,
        labels=labels,
        com_flags=com,
        stable=not unstable,
        unstable_modes=unstable,
        unit_system=units,
        diagnostics={"eigenvalue_sum": float(evals.sum())},
    )


def pseudo_modes_yz(
    hessian_yz: np.ndarray,
    n_ions: int,
    units: Optional[UnitSystem] = None,
) -> ModeStructure:
    """In-plane modes from a 2N x 2N yz Hessian of a planar crystal.

    Vectors are embedded in full 3N coordinates with zero x components;
    out-of-plane modes are not included.
    """
    n = n_ions
    if hessian_yz.shape != (2 * n, 2 * n):
        raise ValueError("hessian must be 2N x 2N")
    evals, evecs = np.linalg.eigh(hessian_yz)
    unstable = [int(m) for m in np.flatnonzero(evals <= 0)]
    freqs = np.sqrt(np.abs(evals)) * np.where(evals > 0, 1.0, -1.0)
    modes = np.zeros((3 * n, 2 * n))
    yz_rows = np.sort(np.concatenate([np.arange(1, 3 * n, 3), np.arange(2, 3 * n, 3)]))
    modes[yz_rows, :] = evecs
    labels, com = _label_modes(modes, n)
    return ModeStructure(
        frequencies=freqs,
        modes=modes,
        provenance="pseudopotential",
        n_ions=n,
        labels=labels,
        com_flags=com,
        stable=not unstable,
        unstable_modes=unstable,
        unit_system=units,
        diagnostics={"eigenvalue_sum": float(evals.sum()), "subspace": "yz"},
    )


def monodromy_matrix(
    a_mat: np.ndarray, q_mat: np.ndarray, steps: int = DEFAULT_FLOQUET_STEPS
) -> np.ndarray:
    """One-period propagator of x'' + (A - 2 Q cos(2t)) x = 0 over t in [0, pi].

    Fixed-step RK4 on the 2n first-order system, all columns at once.
    """
    n = a_mat.shape[0]
    x = np.zeros((n, 2 * n))
    v = np.zeros((n, 2 * n))
    x[:, :n] = np.eye(n)
    v[:, n:] = np.eye(n)
    dt = np.pi / steps
    for s in range(steps):
        t = s * dt
        c0 = np.cos(2.0 * t)
        ch = np.cos(2.0 * (t + 0.5 * dt))
        c1 = np.cos(2.0 * (t + dt))
        k0 = -a_mat + (2.0 * c0) * q_mat
        kh = -a_mat + (2.0 * ch) * q_mat
        k1 = -a_mat + (2.0 * c1) * q_mat
        k1x, k1v = v, k0 @ x
        k2x = v + (0.5 * dt) * k1v
        k2v = kh @ (x + (0.5 * dt) * k1x)
        k3x = v + (0.5 * dt) * k2v
        k3v = kh @ (x + (0.5 * dt) * k2x)
        k4x = v + dt * k3v
        k4v = k1 @ (x + dt * k3x)
        x = x + (dt / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        v = v + (dt / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    return np.vstack([x, v])


def symplectic_residual(monodromy: np.ndarray) -> float:
    n2 = monodromy.shape[0]
    n = n2 // 2
    j = np.zeros((n2, n2))
    j[:n, n:] = np.eye(n)
    j[n:, :n] = -np.eye(n)
    return float(np.max(np.abs(monodromy.T @ j @ monodromy - j)))


def _extract_floquet_block(a_mat, q_mat, steps, stability_tol):
    """Exponents and t=0 position-space vectors for one decoupled block."""
    n = a_mat.shape[0]
    m = monodromy_matrix(a_mat, q_mat, steps)
    sympl = symplectic_residual(m)
    evals, evecs = np.linalg.eig(m)
    order = np.argsort(-evals.imag)  # upper-half-plane eigenvalues first
    gammas, vectors, unstable = [], [], []
    for idx in order[:n]:
        lam = evals[idx]
        gam = np.angle(lam) / np.pi
        if abs(abs(lam) - 1.0) > stability_tol or lam.imag <= 0:
            # off the unit circle or a real multiplier: parametric instability
            unstable.append((float(abs(lam)), float(gam)))
        u = evecs[:n, idx]
        jmax = int(np.argmax(np.abs(u)))
        u = u * np.exp(-1j * np.angle(u[jmax]))
        b = np.real(u)
        norm = np.linalg.norm(b)
        if norm == 0:
            raise RuntimeError("degenerate Floquet pair extraction failed")
        vectors.append(b / norm)
        gammas.append(gam)
    return np.array(gammas), np.array(vectors).T, unstable, sympl


def floquet_modes(
    hessians: HessianSet,
    trap: TrapParams,
    steps: int = DEFAULT_FLOQUET_STEPS,
    stability_tol: float = STABILITY_TOL,
    units: Optional[UnitSystem] = None,
) -> ModeStructure:
    """Mode frequencies and vectors from the monodromy of the linearized system.

    Frequencies are the principal-branch characteristic exponents in units
    of omega_rf/2.  Vectors follow a fixed convention: position-space part
    of the monodromy eigenvector at t = 0, made real by a global phase that
    renders the largest-magnitude component real positive, then normalized.
    When the x motion decouples exactly (planar crystal) the x and yz blocks
    are solved separately, which also resolves cross-block degeneracies.
    """
    n = hessians.n_ions
    a_mat = np.diag(np.tile(trap.a, n)) + hessians.d0
    q_mat = np.diag(np.tile(trap.q, n)) + hessians.d2

    x_idx = np.arange(0, 3 * n, 3)
    yz_idx = np.sort(np.concatenate([x_idx + 1, x_idx + 2]))
    cross = max(
        np.max(np.abs(a_mat[np.ix_(x_idx, yz_idx)])),
        np.max(np.abs(q_mat[np.ix_(x_idx, yz_idx)])),
    )

    freqs = np.zeros(3 * n)
    vecs = np.zeros((3 * n, 3 * n))
    unstable_info = []
    sympl = 0.0
    if cross < 1e-12:
        for idx in (x_idx, yz_idx):
            g, v, unst, sy = _extract_floquet_block(
                a_mat[np.ix_(idx, idx)], q_mat[np.ix_(idx, idx)], steps, stability_tol
            )
            # scatter block vectors into full coordinates
            for k in range(len(g)):
                col = idx[k]
                freqs[col] = g[k]
                vecs[idx, col] = v[:, k]
            unstable_info.extend(unst)
            sympl = max(sympl, sy)
    else:
        g, v, unstable_info, sympl = _extract_floquet_block(
            a_mat, q_mat, steps, stability_tol
        )
        freqs = g
        vecs = v

    order = np.argsort(freqs)
    freqs = freqs[order]
    vecs = vecs[:, order]
    if sympl > SYMPLECTIC_TOL:
        warnings.warn(f"monodromy symplecticity residual {sympl:.2e}")

    overlaps = np.abs(vecs.T @ vecs - np.eye(3 * n))
    labels, com = _label_modes(vecs, n)
    unstable = [int(i) for i in np.flatnonzero(freqs <= 0)]
    return ModeStructure(
        frequencies=freqs,
        modes=vecs,
        provenance="floquet",
        n_ions=n,
        labels=labels,
        com_flags=com,
        stable=not unstable_info and not unstable,
        unstable_modes=unstable,
        unit_system=units,
        diagnostics={
            "symplectic_residual": sympl,
            "max_pairwise_overlap": float(np.max(overlaps)),
            "stability_violations": unstable_info,
            "fourier_residual": hessians.residual,
        },
    )


@dataclass
class ModeMatch:
    """Pairing of full-motion modes with pseudopotential modes."""

    pairs: list  # (full index, pseudo index)
    shifts: np.ndarray  # (omega_f - omega_p)/omega_f per pair, full-index order
    ambiguities: list  # (full index, candidate pseudo indices)


def match_and_shift(full: ModeStructure, pseudo: ModeStructure) -> ModeMatch:
    """Greedy overlap matching of two mode structures and normalized shifts.

    Each mode is used once; matches are made in order of decreasing
    eigenvector overlap.  Near-ties (within 1e-3) are reported as
    ambiguities with both candidates.
    """
    if full.modes.shape != pseudo.modes.shape:
        raise ValueError("mode structures have different sizes")
    overlap = np.abs(full.modes.T @ pseudo.modes)
    n = overlap.shape[0]
    pairs = []
    ambiguities = []
    avail_f = set(range(n))
    avail_p = set(range(n))
    work = overlap.copy()
    for _ in range(n):
        i, j = np.unravel_index(np.argmax(work), work.shape)
        row = work[i].copy()
        row[j] = -np.inf
        second = row.max()
        if work[i, j] - second < 1e-3 and second > -np.inf:
            ambiguities.append((int(i), int(j), int(np.argmax(row))))
        pairs.append((int(i), int(j)))
        work[i, :] = -np.inf
        work[:, j] = -np.inf
        avail_f.discard(int(i))
        avail_p.discard(int(j))
    pairs.sort()
    shifts = np.array(
        [
            (full.frequencies[i] - pseudo.frequencies[j]) / full.frequencies[i]
            for i, j in pairs
        ]
    )
    if ambiguities:
        warnings.warn(f"{len(ambiguities)} ambiguous mode matches")
    return ModeMatch(pairs=pairs, shifts=shifts, ambiguities=ambiguities)
