"""Conservative finite-volume Fokker-Planck solver on 1D/2D grids.

The evolved quantity is the density ``P`` with respect to the Riemannian
volume ``sqrt(det g) d^K q``. Each grid cell therefore carries a volume
weight ``sqrt(det g) * dV`` and a mass ``P * weight``; fluxes are exchanged
across faces so the total mass is conserved to rounding.

Face fluxes, with ``w = sqrt(det g)`` and ``D = g^-1 kappa g^-1``::

    A^mu = w * (gamma * (g^-1 grad U)^mu * P + gamma^2 / 2 * D^{mu nu} d_nu P)

``w``, ``g^-1`` and ``D`` are arithmetic averages of the adjacent cell
centres; ``grad U`` is evaluated analytically at the face; ``P`` at the
face is the average of the two cells. Domain boundaries are zero-flux.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    DomainError,
    GridMismatch,
    MismatchedTrajectory,
    NegativeDensity,
    OverflowGuard,
    StabilityViolation,
)
from .landscape import LossLandscape, NoiseModel
from .spd import MetricSpec, PowerLaw, local_geometry

log = logging.getLogger(__name__)

__all__ = [
    "GridSpec",
    "GridDensity",
    "FokkerPlanckOperator",
    "fp_step",
    "stationary_boltzmann",
    "total_mass",
    "shannon_entropy",
    "entropy_change",
    "entropy_production",
    "l1_distance",
    "density_cdf_1d",
]

NEGATIVE_TOL = 1e-12
FORMS = ("general", "covariant", "flat")


@dataclass(frozen=True)
class GridSpec:
    """Regular cell-centred grid on a 1D interval or 2D rectangle."""

    lo: Tuple[float, ...]
    hi: Tuple[float, ...]
    n: Tuple[int, ...]

    def __post_init__(self):
        lo = tuple(float(x) for x in np.atleast_1d(self.lo))
        hi = tuple(float(x) for x in np.atleast_1d(self.hi))
        n = tuple(int(x) for x in np.atleast_1d(self.n))
        if not (len(lo) == len(hi) == len(n)) or len(n) not in (1, 2):
            raise DomainError("GridSpec needs matching per-axis lo, hi, n with 1 or 2 axes")
        for a, b, m in zip(lo, hi, n):
            if not a < b:
                raise DomainError(f"grid axis needs lo < hi, got [{a}, {b}]")
            if m < 8:
                raise DomainError(f"grid axis needs at least 8 cells, got {m}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "n", n)

    @property
    def dims(self) -> int:
        return len(self.n)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.n

    @property
    def dx(self) -> Tuple[float, ...]:
        return tuple((b - a) / m for a, b, m in zip(self.lo, self.hi, self.n))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.dx))

    @property
    def volume(self) -> float:
        return float(np.prod([b - a for a, b in zip(self.lo, self.hi)]))

    def axis_centers(self, axis: int) -> np.ndarray:
        a, m, h = self.lo[axis], self.n[axis], self.dx[axis]
        return a + h * (np.arange(m) + 0.5)

    def axis_edges(self, axis: int) -> np.ndarray:
        return np.linspace(self.lo[axis], self.hi[axis], self.n[axis] + 1)

    def points(self) -> np.ndarray:
        """Cell centres, shape ``n + (dims,)``."""
        axes = np.meshgrid(*[self.axis_centers(a) for a in range(self.dims)], indexing="ij")
        return np.stack(axes, axis=-1)

    def face_points(self, axis: int) -> np.ndarray:
        """Interior face centres normal to ``axis``, shape with ``n[axis] - 1`` along it."""
        pts = self.points()
        sl_l = [slice(None)] * self.dims
        sl_r = [slice(None)] * self.dims
        sl_l[axis] = slice(0, -1)
        sl_r[axis] = slice(1, None)
        return 0.5 * (pts[tuple(sl_l)] + pts[tuple(sl_r)])

    def to_dict(self):
        return {"lo": list(self.lo), "hi": list(self.hi), "n": list(self.n)}


@dataclass
class GridDensity:
    """Cell values of a density plus the per-cell volume weights they integrate against."""

    grid: GridSpec
    values: np.ndarray
    volumes: Optional[np.ndarray] = None
    overflow: int = 0  # histogram members that fell outside the grid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.shape)
        if self.volumes is None:
            self.volumes = np.full(self.grid.shape, self.grid.cell_volume)
        else:
            self.volumes = np.broadcast_to(np.asarray(self.volumes, dtype=float), self.grid.shape).copy()
        if np.any(self.values < -NEGATIVE_TOL):
            raise NegativeDensity(f"density has negative cell value {self.values.min():.3e}")
        if np.any(self.volumes <= 0):
            raise DomainError("cell volumes must be positive")

    @property
    def masses(self) -> np.ndarray:
        return self.values * self.volumes

    def normalized(self) -> "GridDensity":
        m = total_mass(self)
        if m <= 0:
            raise DomainError("cannot normalise a density with zero mass")
        return GridDensity(self.grid, self.values / m, self.volumes)

    def with_volumes(self, volumes) -> "GridDensity":
        """Re-express on new cell weights keeping every cell's mass."""
        volumes = np.broadcast_to(np.asarray(volumes, dtype=float), self.grid.shape)
        if np.array_equal(volumes, self.volumes):
            return self
        return GridDensity(self.grid, self.masses / volumes, volumes)

    @classmethod
    def from_function(cls, grid: GridSpec, fn, volumes=None) -> "GridDensity":
        vals = np.asarray(fn(grid.points()), dtype=float)
        return cls(grid, vals, volumes).normalized()

    @classmethod
    def uniform(cls, grid: GridSpec, volumes=None) -> "GridDensity":
        return cls(grid, np.ones(grid.shape), volumes).normalized()

    def mean(self) -> np.ndarray:
        w = self.masses / self.masses.sum()
        return np.tensordot(w, self.grid.points(), axes=self.grid.dims)

    def variance(self) -> np.ndarray:
        pts = self.grid.points()
        w = self.masses / self.masses.sum()
        mu = np.tensordot(w, pts, axes=self.grid.dims)
        return np.tensordot(w, (pts - mu) ** 2, axes=self.grid.dims)


def total_mass(p: GridDensity) -> float:
    return float(np.sum(p.values * p.volumes))


def shannon_entropy(p: GridDensity) -> float:
    """Differential entropy ``-sum P ln P * volume`` with ``0 ln 0 = 0``."""
    v = p.values
    pos = v > 0
    return float(-np.sum(v[pos] * np.log(v[pos]) * p.volumes[pos]))


def l1_distance(p: GridDensity, q: GridDensity) -> float:
    """L1 distance between the cell-mass distributions of two densities."""
    if p.grid != q.grid:
        raise GridMismatch("densities live on different grids")
    return float(np.sum(np.abs(p.masses - q.masses)))


def density_cdf_1d(p: GridDensity, x) -> np.ndarray:
    """CDF of a 1D grid density, linear within each cell."""
    if p.grid.dims != 1:
        raise DomainError("CDF is only defined for 1D grids")
    edges = p.grid.axis_edges(0)
    cum = np.concatenate([[0.0], np.cumsum(p.masses)])
    return np.interp(x, edges, cum, left=0.0, right=cum[-1])


def stationary_boltzmann(land: LossLandscape, gamma: float, grid: GridSpec, volumes=None) -> GridDensity:
    """Normalised ``exp(-2 U / gamma)`` on the grid.

    ``volumes`` selects the measure; pass the solver's weights for a
    curved metric (the stationary state of the natural-gradient equation
    is Boltzmann with respect to the Riemannian volume).
    """
    if not gamma > 0:
        raise DomainError("gamma must be positive")
    u = np.asarray(land.value(grid.points()), dtype=float)
    expo = (2.0 / gamma) * (u - u.min())
    if expo.max() > 700.0:
        raise OverflowGuard(
            f"U varies by {u.max() - u.min():.3g} on the grid, beyond 700*gamma/2 = {350 * gamma:.3g}"
        )
    return GridDensity(grid, np.exp(-expo), volumes).normalized()


# -- operator ---------------------------------------------------------------------


class FokkerPlanckOperator:
    """Assembled sparse generator ``dP/dt = (L_drift + L_diff) P``.

    Parameters
    ----------
    grid : GridSpec
    land, noise : landscape and noise model (dimension must equal ``grid.dims``)
    metric : MetricSpec
    gamma : float
        Learning rate.
    form : {"general", "covariant", "flat"}
        ``general`` uses ``D = g^-1 kappa g^-1``; ``covariant`` assumes
        ``kappa = g`` so ``D = g^-1``; ``flat`` uses the identity metric
        scaled by ``epsilon`` (drift ``gamma/epsilon``, diffusion
        ``kappa / epsilon^2``).
    scheme : {"explicit", "semi_implicit"}
        Explicit Euler, or implicit diffusion with explicit drift.
    """

    def __init__(self, grid: GridSpec, land, noise, metric: MetricSpec, gamma: float,
                 form: str = "general", scheme: str = "explicit", epsilon: float = 1.0):
        if land.dim != grid.dims or noise.dim != grid.dims:
            raise GridMismatch(
                f"grid has {grid.dims} axes but landscape/noise have dims {land.dim}/{noise.dim}"
            )
        if form not in FORMS:
            raise DomainError(f"form must be one of {FORMS}")
        if scheme not in ("explicit", "semi_implicit"):
            raise DomainError("scheme must be 'explicit' or 'semi_implicit'")
        if not gamma > 0:
            raise DomainError("gamma must be positive")
        self.grid = grid
        self.gamma = float(gamma)
        self.form = form
        self.scheme = scheme
        self.metric = metric

        pts = grid.points()
        kappa = noise.kappa_field(pts)
        if form == "flat":
            k = grid.dims
            ginv = np.broadcast_to(np.eye(k) / epsilon, kappa.shape)
            diff = kappa / epsilon ** 2
            w = np.ones(grid.shape)
        else:
            geo = local_geometry(kappa, metric)
            ginv = geo.inverse_metric
            diff = geo.inverse_metric if form == "covariant" else geo.diffusion
            w = geo.sqrt_det
        self.sqrt_det = np.asarray(w, dtype=float)
        self.volumes = self.sqrt_det * grid.cell_volume
        self._ginv = np.asarray(ginv)
        self._diff = np.asarray(diff)
        self._land = land
        self.l_drift, self.l_diff, self._vmax = self._assemble()
        self.l_total = (self.l_drift + self.l_diff).tocsr()
        if self.max_peclet > 2.0:
            log.warning("cell Peclet number %.3g > 2: central drift fluxes may produce negative cells; "
                        "refine the grid", self.max_peclet)
        self._dmax = float(np.max(np.linalg.eigvalsh(self._diff.reshape(-1, grid.dims, grid.dims)))) if self._diff.size else 0.0
        self._lu = {}

    # assembly
    def _assemble(self):
        grid, g = self.grid, self.gamma
        shape = grid.shape
        ncell = int(np.prod(shape))
        idx = np.arange(ncell).reshape(shape)
        dV = grid.cell_volume
        rows_d, cols_d, vals_d = [], [], []
        rows_k, cols_k, vals_k = [], [], []
        vmax = 0.0
        self.max_peclet = 0.0
        for a in range(grid.dims):
            h = grid.dx[a]
            area = dV / h
            sl_l = [slice(None)] * grid.dims
            sl_r = [slice(None)] * grid.dims
            sl_l[a] = slice(0, -1)
            sl_r[a] = slice(1, None)
            sl_l, sl_r = tuple(sl_l), tuple(sl_r)
            il, ir = idx[sl_l].ravel(), idx[sl_r].ravel()
            wf = 0.5 * (self.sqrt_det[sl_l] + self.sqrt_det[sl_r]).ravel()
            ginv_f = 0.5 * (self._ginv[sl_l] + self._ginv[sl_r])
            diff_f = 0.5 * (self._diff[sl_l] + self._diff[sl_r])
            grad_u = np.asarray(self._land.gradient(grid.face_points(a)), dtype=float)
            v = np.einsum("...j,...j->...", ginv_f[..., a, :], grad_u).ravel()
            vmax = max(vmax, float(np.max(np.abs(v))) if v.size else 0.0)
            dn = 0.5 * g * diff_f[..., a, a].ravel()
            with np.errstate(divide="ignore", invalid="ignore"):
                pe = np.where(v != 0, np.abs(v) * h / dn, 0.0)
            self.max_peclet = max(self.max_peclet, float(np.max(pe)) if pe.size else 0.0)
            # drift: gamma * w * v * (P_L + P_R) / 2
            c = g * wf * v * 0.5 * area
            for col in (il, ir):
                rows_d += [il, ir]
                cols_d += [col, col]
                vals_d += [c, -c]
            # normal diffusion: gamma^2/2 * w * D_aa * (P_R - P_L) / h
            c = 0.5 * g * g * wf * diff_f[..., a, a].ravel() / h * area
            rows_k += [il, il, ir, ir]
            cols_k += [ir, il, ir, il]
            vals_k += [c, -c, -c, c]
            # cross diffusion: gamma^2/2 * w * D_ab * avg of centred d_b P in both cells
            for b in range(grid.dims):
                if b == a:
                    continue
                dab = diff_f[..., a, b].ravel()
                if not np.any(dab):
                    continue
                hb = grid.dx[b]
                cc = 0.5 * g * g * wf * dab * area * 0.5 / (2.0 * hb)
                for side in (sl_l, sl_r):
                    cells = idx[side]
                    up = np.roll(idx, -1, axis=b)[side]
                    dn = np.roll(idx, 1, axis=b)[side]
                    pos = [slice(None)] * grid.dims
                    pos[b] = slice(-1, None)
                    up = up.copy()
                    up[tuple(pos)] = cells[tuple(pos)]
                    pos[b] = slice(0, 1)
                    dn = dn.copy()
                    dn[tuple(pos)] = cells[tuple(pos)]
                    up, dn = up.ravel(), dn.ravel()
                    rows_k += [il, il, ir, ir]
                    cols_k += [up, dn, up, dn]
                    vals_k += [cc, -cc, -cc, cc]
        inv_vol = 1.0 / self.volumes.ravel()

        def build(rows, cols, vals):
            if not rows:
                return sp.csr_matrix((ncell, ncell))
            r = np.concatenate(rows)
            m = sp.coo_matrix((np.concatenate(vals), (r, np.concatenate(cols))), shape=(ncell, ncell))
            return sp.diags(inv_vol) @ m.tocsr()

        return build(rows_d, cols_d, vals_d), build(rows_k, cols_k, vals_k), vmax

    @property
    def stability_bound(self) -> float:
        """Largest admissible explicit time step (``inf`` if nothing moves)."""
        hmin = min(self.grid.dx)
        bounds = []
        if self.scheme == "explicit" and self._dmax > 0:
            bounds.append(0.4 * hmin ** 2 / (self.gamma ** 2 * self._dmax))
        if self._vmax > 0:
            bounds.append(0.4 * hmin / (self.gamma * self._vmax))
        return min(bounds) if bounds else math.inf

    def rhs(self, values: np.ndarray) -> np.ndarray:
        return (self.l_total @ values.ravel()).reshape(self.grid.shape)

    def _solver(self, dt):
        if dt not in self._lu:
            n = self.l_diff.shape[0]
            self._lu[dt] = spla.splu((sp.identity(n, format="csc") - dt * self.l_diff).tocsc())
        return self._lu[dt]

    def _advance(self, values, dt):
        if self.scheme == "explicit":
            new = values + dt * self.rhs(values)
        else:
            rhs = values.ravel() + dt * (self.l_drift @ values.ravel())
            new = self._solver(dt).solve(rhs).reshape(self.grid.shape)
        low = new.min()
        if low < -NEGATIVE_TOL:
            log.warning("density dropped to %.3e; clamping negative cells", low)
            # rescale so clamping does not create mass
            vol = self.volumes
            mass = float(np.sum(new * vol))
            new = np.where(new < 0.0, 0.0, new)
            new *= mass / float(np.sum(new * vol))
        return new

    def check_dt(self, dt):
        if not dt > 0:
            raise DomainError("dt must be positive")
        bound = self.stability_bound
        if dt > bound:
            raise StabilityViolation(f"dt={dt:.4g} exceeds the stability bound {bound:.4g}")

    def step(self, p: GridDensity, dt: float) -> GridDensity:
        self.check_dt(dt)
        p = self._on_grid(p)
        return GridDensity(self.grid, self._advance(p.values, dt), self.volumes)

    def evolve(self, p: GridDensity, dt: float, steps: int, every: Optional[int] = None) -> List[GridDensity]:
        """Advance ``steps`` times; returns snapshots every ``every`` steps (first and last included)."""
        self.check_dt(dt)
        p = self._on_grid(p)
        vals = p.values
        out = [p]
        for i in range(1, steps + 1):
            vals = self._advance(vals, dt)
            if (every and i % every == 0) or i == steps:
                out.append(GridDensity(self.grid, vals, self.volumes))
        return out

    def _on_grid(self, p: GridDensity) -> GridDensity:
        if p.grid != self.grid:
            raise GridMismatch("density grid differs from the operator grid")
        return p.with_volumes(self.volumes)

    # entropy production
    def production_rate(self, p: GridDensity) -> float:
        """``int w [gamma g^{mu nu} d_nu U d_mu P + gamma^2/2 D^{mu nu} d_mu P d_nu P / P] d^K q``.

        Evaluated face by face from the same fluxes the update uses, so
        ``grad P / P`` becomes ``(P_R - P_L) / (h * P_face)``.
        """
        vals = self._on_grid(p).values.ravel()
        grid = self.grid
        total = 0.0
        flux = self._face_fluxes(vals)
        for a, (il, ir, amu) in enumerate(flux):
            pl, pr = vals[il], vals[ir]
            pf = 0.5 * (pl + pr)
            ok = pf > 0
            area = grid.cell_volume / grid.dx[a]
            total += float(np.sum(amu[ok] * (pr[ok] - pl[ok]) / pf[ok]) * area)
        return total

    def _face_fluxes(self, vals):
        """Per-axis (left idx, right idx, A_f) with ``dm_L = +A_f * area``."""
        grid = self.grid
        idx = np.arange(vals.size).reshape(grid.shape)
        out = []
        g = self.gamma
        pgrid = vals.reshape(grid.shape)
        for a in range(grid.dims):
            h = grid.dx[a]
            sl_l = [slice(None)] * grid.dims
            sl_r = [slice(None)] * grid.dims
            sl_l[a] = slice(0, -1)
            sl_r[a] = slice(1, None)
            sl_l, sl_r = tuple(sl_l), tuple(sl_r)
            wf = 0.5 * (self.sqrt_det[sl_l] + self.sqrt_det[sl_r])
            ginv_f = 0.5 * (self._ginv[sl_l] + self._ginv[sl_r])
            diff_f = 0.5 * (self._diff[sl_l] + self._diff[sl_r])
            grad_u = np.asarray(self._land.gradient(grid.face_points(a)), dtype=float)
            v = np.einsum("...j,...j->...", ginv_f[..., a, :], grad_u)
            pl, pr = pgrid[sl_l], pgrid[sl_r]
            amu = g * v * 0.5 * (pl + pr) + 0.5 * g * g * diff_f[..., a, a] * (pr - pl) / h
            if grid.dims > 1:
                for b in range(grid.dims):
                    if b != a:
                        gb = _reflect_gradient(pgrid, grid.dx[b], b)
                        amu = amu + 0.5 * g * g * diff_f[..., a, b] * 0.5 * (gb[sl_l] + gb[sl_r])
            out.append((idx[sl_l].ravel(), idx[sl_r].ravel(), (wf * amu).ravel()))
        return out


def _reflect_gradient(p, h, axis):
    pad = [(0, 0)] * p.ndim
    pad[axis] = (1, 1)
    pe = np.pad(p, pad, mode="edge")
    sl_up = [slice(None)] * p.ndim
    sl_dn = [slice(None)] * p.ndim
    sl_up[axis] = slice(2, None)
    sl_dn[axis] = slice(0, -2)
    return (pe[tuple(sl_up)] - pe[tuple(sl_dn)]) / (2.0 * h)


def fp_step(p: GridDensity, land, noise, metric: MetricSpec, gamma: float, dt: float,
            form: str = "general", scheme: str = "explicit") -> GridDensity:
    """One conservative update; builds the operator each call (use
    :class:`FokkerPlanckOperator` directly for long runs)."""
    op = FokkerPlanckOperator(p.grid, land, noise, metric, gamma, form=form, scheme=scheme)
    return op.step(p, dt)


def entropy_change(p_traj: Sequence[GridDensity]) -> float:
    """S(T) - S(0) from the Shannon entropy of the end points."""
    if len(p_traj) < 2:
        raise MismatchedTrajectory("need at least two snapshots")
    return shannon_entropy(p_traj[-1]) - shannon_entropy(p_traj[0])


def entropy_production(p_traj: Sequence[GridDensity], land, noise, metric: MetricSpec,
                       gamma: float, dt: float, form: str = "general") -> float:
    """Trapezoid time integral of the entropy-production integrand.

    ``dt`` is the spacing between consecutive snapshots.
    """
    if len(p_traj) < 2:
        raise MismatchedTrajectory("need at least two snapshots")
    grid = p_traj[0].grid
    if any(p.grid != grid for p in p_traj):
        raise MismatchedTrajectory("snapshots live on different grids")
    op = FokkerPlanckOperator(grid, land, noise, metric, gamma, form=form)
    rates = np.array([op.production_rate(p) for p in p_traj])
    return float(dt * (rates.sum() - 0.5 * (rates[0] + rates[-1])))
