"""Effective, quantum and neural potentials and a 1D Schrödinger solver.

Fields live on the cell centres of a :class:`GridSpec`. Metric fields may
be given as ``None`` (identity), a scalar, a constant ``(K, K)`` matrix,
a per-cell array (1D only) or a per-cell ``grid.shape + (K, K)`` tensor.

The Schrödinger side uses ``hbar = sqrt(2 gamma / beta)`` and
``M = 1 / (2 gamma)``, so ``hbar^2 / (2M) = 2 gamma^2 / beta`` is the
prefactor of the quantum potential.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    DegenerateDensity,
    DimensionMismatch,
    DomainError,
    GridMismatch,
    NonConvergence,
    PhaseUndefined,
    StabilityViolation,
)
from .fokker_planck import GridDensity, GridSpec

__all__ = [
    "ScalarField",
    "WaveField",
    "SplitStepPropagator",
    "planck_mass_from",
    "effective_potential",
    "quantum_potential",
    "neural_potential",
    "raised_kappa",
    "constraint_residual",
    "entropic_overlap",
    "schrodinger_evolve",
    "schrodinger_path",
    "ground_state",
    "madelung_decompose",
    "madelung_compose",
    "continuity_rhs",
    "continuity_step",
    "DENSITY_FLOOR",
    "PHASE_THRESHOLD",
]

DENSITY_FLOOR = 1e-300
PHASE_THRESHOLD = 1e-8
NORM_TOL = 1e-9
BOUNDARIES = ("dirichlet", "periodic")


@dataclass
class ScalarField:
    """Real values on grid cells, optionally masked and time-stamped."""

    grid: GridSpec
    values: np.ndarray
    time: float = 0.0
    mask: Optional[np.ndarray] = None  # True where the value is defined
    degenerate: bool = False  # input density was clamped somewhere

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.shape)
        if not np.all(np.isfinite(self.values)):
            raise DomainError("scalar field has non-finite values")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool).reshape(self.grid.shape)

    def __add__(self, other: "ScalarField") -> "ScalarField":
        if other.grid != self.grid:
            raise GridMismatch("fields live on different grids")
        mask = _and_masks(self.mask, other.mask)
        return ScalarField(self.grid, self.values + other.values, self.time, mask,
                           self.degenerate or other.degenerate)

    def stats(self, where=None) -> Tuple[float, float]:
        """Mean and standard deviation over ``where`` (and the field's own mask)."""
        sel = np.ones(self.grid.shape, dtype=bool) if where is None else np.asarray(where, dtype=bool)
        if self.mask is not None:
            sel = sel & self.mask
        x = self.values[sel]
        if x.size == 0:
            raise DomainError("no cells selected")
        return float(x.mean()), float(x.std())


def _and_masks(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a & b


@dataclass
class WaveField:
    """Normalised complex amplitude on a 1D grid: ``sum |psi|^2 dx = 1``."""

    grid: GridSpec
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        if self.grid.dims != 1:
            raise DimensionMismatch("wave fields are one-dimensional")
        self.re = np.asarray(self.re, dtype=float).reshape(self.grid.shape)
        self.im = np.asarray(self.im, dtype=float).reshape(self.grid.shape)
        if not (np.all(np.isfinite(self.re)) and np.all(np.isfinite(self.im))):
            raise DomainError("wave field has non-finite values")
        if abs(self.norm() - 1.0) > NORM_TOL:
            raise DomainError(f"wave field norm {self.norm():.12g} is not 1")

    @classmethod
    def from_complex(cls, grid: GridSpec, psi, normalize: bool = True) -> "WaveField":
        psi = np.asarray(psi, dtype=complex).reshape(grid.shape)
        if normalize:
            nrm = math.sqrt(float(np.sum(np.abs(psi) ** 2)) * grid.dx[0])
            if nrm == 0:
                raise DomainError("cannot normalise a zero wave field")
            psi = psi / nrm
        return cls(grid, psi.real, psi.imag)

    @property
    def psi(self) -> np.ndarray:
        return self.re + 1j * self.im

    def norm(self) -> float:
        return float(np.sum(self.re ** 2 + self.im ** 2) * self.grid.dx[0])

    def density(self) -> np.ndarray:
        return self.re ** 2 + self.im ** 2

    def position_mean(self) -> float:
        return float(np.sum(self.density() * self.grid.axis_centers(0)) * self.grid.dx[0])


def planck_mass_from(gamma: float, beta: float) -> Tuple[float, float]:
    """``(hbar, M) = (sqrt(2 gamma / beta), 1 / (2 gamma))``."""
    if not (gamma > 0 and beta > 0):
        raise DomainError("gamma and beta must be positive")
    return math.sqrt(2.0 * gamma / beta), 1.0 / (2.0 * gamma)


# -- metric fields and differential operators -----------------------------------


def _tensor_field(a, grid: GridSpec, what: str) -> np.ndarray:
    k, shape = grid.dims, grid.shape
    if a is None:
        return np.broadcast_to(np.eye(k), shape + (k, k))
    a = np.asarray(getattr(a, "entries", a), dtype=float)
    if a.ndim == 0:
        return np.broadcast_to(a * np.eye(k), shape + (k, k))
    if a.shape == (k, k):
        return np.broadcast_to(a, shape + (k, k))
    if k == 1 and a.shape == shape:
        return a[..., None, None]
    if a.shape == shape + (k, k):
        return a
    raise GridMismatch(f"{what} of shape {a.shape} does not fit grid {shape} with K={k}")


def _metric_field(g, grid: GridSpec):
    """Inverse metric and ``sqrt(det g)`` per cell."""
    gm = _tensor_field(g, grid, "metric field")
    if grid.dims == 1:
        det = gm[..., 0, 0]
        if np.any(det <= 0):
            raise DomainError("metric field must be positive")
        ginv = 1.0 / gm
    else:
        det = np.linalg.det(gm)
        if np.any(det <= 0):
            raise DomainError("metric field must be positive definite")
        ginv = np.linalg.inv(gm)
    return ginv, np.sqrt(det)


def raised_kappa(kappa, g, grid: GridSpec) -> np.ndarray:
    """``g^-1 kappa g^-1`` per cell, the tensor the neural potential expects."""
    ginv, _ = _metric_field(g, grid)
    kap = _tensor_field(kappa, grid, "kappa field")
    return ginv @ kap @ ginv


def _centred_gradient(f, grid: GridSpec) -> np.ndarray:
    return np.stack(
        [np.gradient(f, grid.dx[a], axis=a, edge_order=2) for a in range(grid.dims)], axis=-1
    )


def _axis_slice(k, axis, s, others=slice(1, -1)):
    sl = [others] * k
    sl[axis] = s
    return tuple(sl)


def _extrapolate_pad(f, axis):
    # cubic extrapolation into one ghost cell at each end keeps the edge Laplacian second order
    t = lambda i: np.take(f, [i], axis)
    lo = t(0) + 3 * (t(0) - t(1)) - 3 * (t(1) - t(2)) + (t(2) - t(3))
    hi = t(-1) + 3 * (t(-1) - t(-2)) - 3 * (t(-2) - t(-3)) + (t(-3) - t(-4))
    return np.concatenate([lo, f, hi], axis=axis)


def _elliptic(f, w, a, grid: GridSpec) -> np.ndarray:
    """Conservative ``(1/w) d_mu (w a^{mu nu} d_nu f)``.

    Normal derivatives at faces are compact two-point differences, cross
    derivatives are centred differences averaged onto the face. Ghost
    cells come from cubic extrapolation. In 1D with ``w a = 1`` this
    is the standard three-point Laplacian.
    """
    k, dx = grid.dims, grid.dx
    fp = f
    for ax in range(k):
        fp = _extrapolate_pad(fp, ax)
    wa = np.pad(w[..., None, None] * a, [(1, 1)] * k + [(0, 0), (0, 0)], mode="edge")
    out = np.zeros(grid.shape)
    cross = [np.gradient(fp, dx[nu], axis=nu) for nu in range(k)] if k > 1 else None
    for mu in range(k):
        left = _axis_slice(k, mu, slice(0, -1))
        right = _axis_slice(k, mu, slice(1, None))
        coef = 0.5 * (wa[left] + wa[right])
        flux = coef[..., mu, mu] * (fp[right] - fp[left]) / dx[mu]
        for nu in range(k):
            if nu != mu:
                flux = flux + coef[..., mu, nu] * 0.5 * (cross[nu][left] + cross[nu][right])
        hi = [slice(None)] * k
        lo = [slice(None)] * k
        hi[mu] = slice(1, None)
        lo[mu] = slice(0, -1)
        out += (flux[tuple(hi)] - flux[tuple(lo)]) / dx[mu]
    return out / w


def _check_land(land, grid):
    if land.dim != grid.dims:
        raise DimensionMismatch(f"landscape dim {land.dim} != grid dims {grid.dims}")


def effective_potential(land, g, gamma: float, beta: float, f: float = 0.0,
                        grid: GridSpec = None) -> ScalarField:
    """``V = gamma |grad U|_g^2 - (gamma/beta) div_g(g^-1 grad U) + f`` by central differences."""
    _check_land(land, grid)
    if not beta > 0:
        raise DomainError("beta must be positive")
    ginv, w = _metric_field(g, grid)
    u = np.asarray(land.value(grid.points()), dtype=float)
    du = _centred_gradient(u, grid)
    raised = np.einsum("...mn,...n->...m", ginv, du)
    flux = w[..., None] * raised
    div = sum(np.gradient(flux[..., m], grid.dx[m], axis=m, edge_order=2) for m in range(grid.dims))
    v = gamma * np.einsum("...m,...m->...", du, raised) - (gamma / beta) * div / w + f
    return ScalarField(grid, v)


def _density_root(p: GridDensity):
    vals = p.values
    clamped = bool(np.any(vals <= 0.0))
    if clamped:
        warnings.warn("density clamped to a positive floor", DegenerateDensity, stacklevel=3)
        vals = np.maximum(vals, DENSITY_FLOOR)
    return np.sqrt(vals), clamped


def _potential(p: GridDensity, w, a, gamma, beta, grid) -> ScalarField:
    if p.grid != grid:
        raise GridMismatch("density and field grids differ")
    if not beta > 0:
        raise DomainError("beta must be positive")
    s, clamped = _density_root(p)
    q = -(2.0 * gamma ** 2 / beta) * _elliptic(s, w, a, grid) / s
    return ScalarField(grid, q, degenerate=clamped)


def quantum_potential(p: GridDensity, g, gamma: float, beta: float, grid: GridSpec = None) -> ScalarField:
    """``Q = -(2 gamma^2 / beta) (1/sqrt P) (1/w) d_mu (w g^{mu nu} d_nu sqrt P)``."""
    grid = p.grid if grid is None else grid
    ginv, w = _metric_field(g, grid)
    return _potential(p, w, ginv, gamma, beta, grid)


def neural_potential(p: GridDensity, g, kappa, gamma: float, beta: float,
                     grid: GridSpec = None) -> ScalarField:
    """Quantum potential with the raised noise tensor ``kappa^{mu nu}`` in the elliptic operator.

    ``kappa`` is the already raised tensor (see :func:`raised_kappa`); when
    it equals ``g^{mu nu}`` the result is identical to
    :func:`quantum_potential`.
    """
    grid = p.grid if grid is None else grid
    _, w = _metric_field(g, grid)
    a = _tensor_field(kappa, grid, "kappa field")
    return _potential(p, w, a, gamma, beta, grid)


def constraint_residual(phi_bar: Sequence[ScalarField], land, g, gamma: float,
                        f: float = 0.0) -> ScalarField:
    """``f - d_t phi + gamma |grad phi|_g^2 + gamma |grad U|_g^2`` from two time slices.

    The time derivative is the forward difference between the slices and
    the spatial terms use their average.
    """
    a, b = phi_bar
    if a.grid != b.grid:
        raise GridMismatch("phase slices live on different grids")
    grid = a.grid
    _check_land(land, grid)
    dt = b.time - a.time
    if dt == 0:
        raise DomainError("phase slices must have different times")
    ginv, _ = _metric_field(g, grid)
    mid = 0.5 * (a.values + b.values)
    dphi = _centred_gradient(mid, grid)
    du = _centred_gradient(np.asarray(land.value(grid.points()), dtype=float), grid)
    kin = np.einsum("...m,...mn,...n->...", dphi, ginv, dphi)
    pot = np.einsum("...m,...mn,...n->...", du, ginv, du)
    res = f - (b.values - a.values) / dt + gamma * kin + gamma * pot
    return ScalarField(grid, res, 0.5 * (a.time + b.time), _and_masks(a.mask, b.mask))


def entropic_overlap(phi: ScalarField, land, g) -> ScalarField:
    """Pointwise ``g^{mu nu} d_mu phi d_nu U``; zero when phase and loss fluctuations are orthogonal."""
    grid = phi.grid
    _check_land(land, grid)
    ginv, _ = _metric_field(g, grid)
    dphi = _centred_gradient(phi.values, grid)
    du = _centred_gradient(np.asarray(land.value(grid.points()), dtype=float), grid)
    return ScalarField(grid, np.einsum("...m,...mn,...n->...", dphi, ginv, du), phi.time, phi.mask)


# -- Schrödinger solver ----------------------------------------------------------


def _laplacian(n: int, dx: float, boundary: str) -> sp.csc_matrix:
    if boundary not in BOUNDARIES:
        raise DomainError(f"boundary must be one of {BOUNDARIES}")
    main = np.full(n, -2.0)
    off = np.ones(n - 1)
    lap = sp.diags([off, main, off], [-1, 0, 1], format="lil")
    if boundary == "periodic":
        lap[0, n - 1] = 1.0
        lap[n - 1, 0] = 1.0
    else:
        # wall on the outer faces: antisymmetric ghost psi_ghost = -psi_edge
        lap[0, 0] = -3.0
        lap[n - 1, n - 1] = -3.0
    return (lap / dx ** 2).tocsc()


def _hamiltonian(v: ScalarField, hbar, mass, boundary) -> sp.csc_matrix:
    if v.grid.dims != 1:
        raise DimensionMismatch("the Schrödinger solver is one-dimensional")
    if not (hbar > 0 and mass > 0):
        raise DomainError("hbar and mass must be positive")
    lap = _laplacian(v.grid.n[0], v.grid.dx[0], boundary)
    return (-(hbar ** 2) / (2.0 * mass) * lap + sp.diags(v.values)).tocsc()


class SplitStepPropagator:
    """Strang splitting: half potential kick, Crank-Nicolson kinetic step, half kick.

    Both factors are unitary, so the norm is preserved to rounding.
    """

    def __init__(self, v: ScalarField, hbar: float, mass: float, dt: float,
                 boundary: str = "dirichlet"):
        if v.grid.dims != 1:
            raise DimensionMismatch("the Schrödinger solver is one-dimensional")
        if not (hbar > 0 and mass > 0 and dt > 0):
            raise DomainError("hbar, mass and dt must be positive")
        vmax = float(np.max(np.abs(v.values)))
        if dt * vmax / hbar >= 0.5:
            raise StabilityViolation(f"dt*max|V|/hbar = {dt * vmax / hbar:.3g} >= 0.5")
        self.grid, self.dt = v.grid, dt
        n = v.grid.n[0]
        kin = -(hbar ** 2) / (2.0 * mass) * _laplacian(n, v.grid.dx[0], boundary)
        eye = sp.identity(n, format="csc", dtype=complex)
        a = (eye + 0.5j * dt / hbar * kin).tocsc()
        self._rhs = (eye - 0.5j * dt / hbar * kin).tocsr()
        self._lu = spla.splu(a)
        self._half_kick = np.exp(-0.5j * dt / hbar * v.values)

    def step(self, psi: np.ndarray) -> np.ndarray:
        psi = self._half_kick * psi
        psi = self._lu.solve(self._rhs @ psi)
        return self._half_kick * psi


def schrodinger_path(psi0: WaveField, v: ScalarField, hbar: float, mass: float, dt: float,
                     steps: int, every: int = 1, boundary: str = "dirichlet") -> List[WaveField]:
    """Wave fields at step 0, every ``every`` steps and at the end."""
    if psi0.grid != v.grid:
        raise GridMismatch("wave field and potential grids differ")
    prop = SplitStepPropagator(v, hbar, mass, dt, boundary)
    psi = psi0.psi
    out = [psi0]
    for i in range(1, steps + 1):
        psi = prop.step(psi)
        if i % every == 0 or i == steps:
            out.append(WaveField(psi0.grid, psi.real, psi.imag))
    return out


def schrodinger_evolve(psi0: WaveField, v: ScalarField, hbar: float, mass: float, dt: float,
                       steps: int, boundary: str = "dirichlet") -> WaveField:
    """Evolve ``i hbar psi_t = -(hbar^2/2M) psi_qq + V psi`` for ``steps`` steps."""
    return schrodinger_path(psi0, v, hbar, mass, dt, steps, every=max(steps, 1), boundary=boundary)[-1]


def ground_state(v: ScalarField, hbar: float, mass: float, boundary: str = "dirichlet",
                 tol: float = 1e-10, max_iter: int = 10000,
                 dtau: Optional[float] = None) -> Tuple[float, WaveField]:
    """Lowest eigenpair by backward-Euler imaginary-time steps with renormalisation.

    The potential is shifted by its minimum internally and the shift is
    added back to the energy. Iteration stops once the energy changes by
    less than ``tol`` between steps.
    """
    grid = v.grid
    h = _hamiltonian(v, hbar, mass, boundary)
    vmin = float(np.min(v.values))
    n, dx = grid.n[0], grid.dx[0]
    shifted = (h - vmin * sp.identity(n, format="csc")).tocsc()
    if dtau is None:
        width = grid.hi[0] - grid.lo[0]
        dtau = 10.0 * hbar / (hbar ** 2 / (2.0 * mass * width ** 2))
    lu = spla.splu((sp.identity(n, format="csc") + (dtau / hbar) * shifted).tocsc())
    psi = np.ones(n)
    psi /= math.sqrt(psi @ psi * dx)
    energy = float(psi @ (shifted @ psi) * dx)
    for _ in range(max_iter):
        psi = lu.solve(psi)
        psi /= math.sqrt(psi @ psi * dx)
        new = float(psi @ (shifted @ psi) * dx)
        if abs(new - energy) < tol:
            energy = new
            break
        energy = new
    else:
        raise NonConvergence(f"imaginary-time iteration did not converge in {max_iter} steps")
    if psi.sum() < 0:
        psi = -psi
    return energy + vmin, WaveField.from_complex(grid, psi)


# -- Madelung form -----------------------------------------------------------------


def madelung_decompose(psi: WaveField, hbar: float,
                       threshold: float = PHASE_THRESHOLD) -> Tuple[GridDensity, ScalarField]:
    """``P = |psi|^2`` and the phase field ``-hbar * arg(psi)``.

    The argument is unwrapped cumulatively from the leftmost cell with
    ``|psi| > threshold``, skipping cells below the threshold; those cells
    are masked out of the returned phase field.
    """
    amp = np.sqrt(psi.density())
    mask = amp > threshold
    if not mask.any():
        raise PhaseUndefined("no cell has enough amplitude to define a phase")
    ang = np.angle(psi.psi[mask])
    phase = np.zeros(psi.grid.shape)
    phase[mask] = -hbar * np.unwrap(ang)
    return GridDensity(psi.grid, psi.density()), ScalarField(psi.grid, phase, mask=mask)


def madelung_compose(p: GridDensity, phi: ScalarField, hbar: float) -> WaveField:
    """``sqrt(P) exp(-i phi / hbar)``; renormalised."""
    if p.grid != phi.grid:
        raise GridMismatch("density and phase grids differ")
    psi = np.sqrt(np.maximum(p.values, 0.0)) * np.exp(-1j * phi.values / hbar)
    return WaveField.from_complex(p.grid, psi)


def continuity_rhs(p_values, phi: ScalarField, gamma: float) -> np.ndarray:
    """``2 gamma d_q (P d_q phi)`` in flux form with closed walls.

    Faces touching a masked phase cell carry no flux.
    """
    grid = phi.grid
    if grid.dims != 1:
        raise DimensionMismatch("the continuity update is one-dimensional")
    dx = grid.dx[0]
    p_values = np.asarray(p_values, dtype=float)
    grad = np.diff(phi.values) / dx
    if phi.mask is not None:
        grad = np.where(phi.mask[1:] & phi.mask[:-1], grad, 0.0)
    flux = 2.0 * gamma * 0.5 * (p_values[1:] + p_values[:-1]) * grad
    flux = np.concatenate([[0.0], flux, [0.0]])
    return np.diff(flux) / dx


def continuity_step(p: GridDensity, phi: ScalarField, gamma: float, dt: float,
                    phi_next: Optional[ScalarField] = None) -> GridDensity:
    """Advance ``P`` by ``dt`` along the phase-driven current.

    With ``phi_next`` (the phase at the end of the step) the update is
    Heun's method; otherwise forward Euler.
    """
    if p.grid != phi.grid:
        raise GridMismatch("density and phase grids differ")
    vals = p.values
    k1 = continuity_rhs(vals, phi, gamma)
    if phi_next is None:
        new = vals + dt * k1
    else:
        k2 = continuity_rhs(vals + dt * k1, phi_next, gamma)
        new = vals + 0.5 * dt * (k1 + k2)
    return GridDensity(p.grid, new, p.volumes)
