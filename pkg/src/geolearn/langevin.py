"""Euler-Maruyama ensembles for the covariant Langevin equation.

One step of a member ``q``::

    q <- q - gamma g^-1 grad U dt  +  b_corr dt  -  gamma g^-1 xi sqrt(dt)

where ``xi`` is a draw of the noise gradient with covariance ``kappa(q)``,
so the stochastic increment has covariance ``gamma^2 g^-1 kappa g^-1 dt``.
``b_corr`` is the Ito correction
``gamma^2/2 * (1/sqrt(det g)) d_nu (sqrt(det g) D^{mu nu})`` that makes the
flat-space histogram evolve as ``sqrt(det g) P`` with ``P`` solving the
covariant Fokker-Planck equation. It vanishes for state-independent noise.

Random streams are owned by fixed blocks of ``BLOCK_SIZE`` members, each
seeded from ``(seed, block_index)``; results do not depend on how blocks
are scheduled.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from .errors import DomainError, EmptyEnsemble, NonFiniteState, StabilityWarning
from .fokker_planck import GridDensity, GridSpec
from .landscape import LossLandscape, NoiseModel
from .spd import MetricSpec, PowerLaw, local_geometry

__all__ = [
    "SimConfig",
    "Ensemble",
    "Trajectory",
    "langevin_step",
    "run_ensemble",
    "empirical_density",
    "block_streams",
    "BLOCK_SIZE",
]

BLOCK_SIZE = 1024
FD_STEP = 1e-5


@dataclass(frozen=True)
class SimConfig:
    gamma: float
    dt: float
    steps: int
    ensemble_size: int = 1
    seed: int = 0
    metric: MetricSpec = PowerLaw(1.0)
    drift_correction: Optional[bool] = None  # None: on iff the noise depends on q
    snapshot_every: Optional[int] = None

    def __post_init__(self):
        if not self.gamma >= 0:
            raise DomainError("gamma must be non-negative")
        if not self.dt > 0:
            raise DomainError("dt must be positive")
        if self.steps < 0 or self.ensemble_size < 1:
            raise DomainError("steps must be >= 0 and ensemble_size >= 1")

    def correction_enabled(self, noise) -> bool:
        if self.drift_correction is None:
            return bool(noise.state_dependent)
        return bool(self.drift_correction)


@dataclass
class Ensemble:
    states: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if self.states.shape[0] == 0:
            raise EmptyEnsemble("ensemble has no members")

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @classmethod
    def at_point(cls, q, size: int) -> "Ensemble":
        q = np.atleast_1d(np.asarray(q, dtype=float))
        return cls(np.tile(q, (size, 1)))

    @classmethod
    def uniform(cls, grid: GridSpec, size: int, seed: int = 0) -> "Ensemble":
        """Members spread uniformly over the grid box (stream independent of the dynamics)."""
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
        lo, hi = np.asarray(grid.lo), np.asarray(grid.hi)
        return cls(lo + (hi - lo) * rng.random((size, grid.dims)))


@dataclass
class Trajectory:
    snapshots: List[Ensemble]
    failures: List[Tuple[int, int]] = field(default_factory=list)  # (member, step)

    @property
    def final(self) -> Ensemble:
        return self.snapshots[-1]

    def times(self) -> np.ndarray:
        return np.array([s.time for s in self.snapshots])

    def moments(self):
        """Per-snapshot mean and covariance over the finite members."""
        out = []
        for s in self.snapshots:
            x = s.states[np.all(np.isfinite(s.states), axis=1)]
            out.append({
                "time": s.time,
                "members": int(x.shape[0]),
                "mean": x.mean(axis=0).tolist(),
                "cov": np.atleast_2d(np.cov(x, rowvar=False)).tolist() if x.shape[0] > 1 else None,
            })
        return out


def block_streams(seed: int, n_members: int) -> List[np.random.Generator]:
    n_blocks = -(-n_members // BLOCK_SIZE)
    return [np.random.default_rng(np.random.SeedSequence([int(seed), b])) for b in range(n_blocks)]


class _Dynamics:
    """Drift and noise evaluation for one (landscape, noise, config) triple."""

    def __init__(self, land, noise, cfg: SimConfig):
        if land.dim != noise.dim:
            raise DomainError(f"landscape dim {land.dim} != noise dim {noise.dim}")
        self.land, self.noise, self.cfg = land, noise, cfg
        self.correct = cfg.correction_enabled(noise)
        self._const = None
        if not noise.state_dependent:
            self._const = local_geometry(noise.kappa_field(np.zeros(noise.dim)), cfg.metric)

    def inverse_metric(self, q):
        if self._const is not None:
            return self._const.inverse_metric
        return local_geometry(self.noise.kappa_field(q), self.cfg.metric).inverse_metric

    def correction(self, q):
        """Ito drift ``(1/w) d_nu (w D^{mu nu})`` by central differences."""
        k = q.shape[-1]
        out = np.zeros_like(q)
        for nu in range(k):
            h = FD_STEP * np.maximum(1.0, np.abs(q[..., nu]))
            e = np.zeros(k)
            e[nu] = 1.0
            qp = q + h[..., None] * e
            qm = q - h[..., None] * e
            gp = local_geometry(self.noise.kappa_field(qp), self.cfg.metric)
            gm = local_geometry(self.noise.kappa_field(qm), self.cfg.metric)
            g0 = local_geometry(self.noise.kappa_field(q), self.cfg.metric)
            wd_p = gp.sqrt_det[..., None] * gp.diffusion[..., :, nu]
            wd_m = gm.sqrt_det[..., None] * gm.diffusion[..., :, nu]
            out += (wd_p - wd_m) / (2.0 * h[..., None]) / g0.sqrt_det[..., None]
        return out

    def step(self, q, streams):
        """One EM step; ``streams`` is a Generator or a list of per-block Generators."""
        cfg = self.cfg
        ginv = self.inverse_metric(q)
        grad = np.asarray(self.land.gradient(q), dtype=float)
        drift = -cfg.gamma * np.einsum("...ij,...j->...i", ginv, grad)
        if self.correct:
            drift = drift + 0.5 * cfg.gamma ** 2 * self.correction(q)
        if isinstance(streams, np.random.Generator):
            xi = self.noise.sample(q, streams)
        else:
            xi = np.empty_like(q)
            for b, rng in enumerate(streams):
                sl = slice(b * BLOCK_SIZE, (b + 1) * BLOCK_SIZE)
                xi[sl] = self.noise.sample(q[sl], rng)
        kick = -cfg.gamma * np.sqrt(cfg.dt) * np.einsum("...ij,...j->...i", ginv, xi)
        return q + drift * cfg.dt + kick


def langevin_step(state, land: LossLandscape, noise: NoiseModel, cfg: SimConfig,
                  rng: np.random.Generator) -> np.ndarray:
    """Advance a single state (or an ``(N, K)`` batch sharing ``rng``) by one step."""
    q = np.asarray(state, dtype=float)
    single = q.ndim == 1
    out = _Dynamics(land, noise, cfg).step(np.atleast_2d(q), rng)
    finite = np.all(np.isfinite(out), axis=1)
    if not finite.all():
        bad = np.flatnonzero(~finite).tolist()
        raise NonFiniteState(f"non-finite state after step (members {bad})", step=1, members=bad)
    return out[0] if single else out


def _stability_check(land, noise, cfg, q0):
    try:
        curv = land.curvature_bound()
    except AttributeError:
        return
    if curv <= 0:
        return
    geo = local_geometry(noise.kappa_field(q0), cfg.metric)
    gmin = float(np.min(np.linalg.eigvalsh(geo.metric.reshape(-1, noise.dim, noise.dim))))
    ratio = cfg.dt * cfg.gamma * curv / gmin
    if ratio >= 2.0:
        warnings.warn(
            f"dt*gamma*lambda_max(H)/lambda_min(g) = {ratio:.3g} >= 2; the discretisation may be unstable",
            StabilityWarning,
            stacklevel=3,
        )


def run_ensemble(land: LossLandscape, noise: NoiseModel, cfg: SimConfig,
                 initial: Ensemble) -> Trajectory:
    """Simulate every member for ``cfg.steps`` steps.

    Snapshots are taken at t=0, every ``cfg.snapshot_every`` steps and at
    the end. Members that become non-finite are frozen as NaN and listed
    in ``Trajectory.failures``; the rest continue.
    """
    q = initial.states.copy()
    if q.shape[1] != land.dim:
        raise DomainError(f"ensemble dim {q.shape[1]} != landscape dim {land.dim}")
    dyn = _Dynamics(land, noise, cfg)
    _stability_check(land, noise, cfg, q[:1])
    streams = block_streams(cfg.seed, q.shape[0])
    t0 = initial.time
    snaps = [Ensemble(q.copy(), t0)]
    failures = []
    alive = np.ones(q.shape[0], dtype=bool)
    every = cfg.snapshot_every
    for i in range(1, cfg.steps + 1):
        # overflow is handled below by freezing the member
        with np.errstate(over="ignore", invalid="ignore"):
            if alive.all():
                q = dyn.step(q, streams)
            else:
                q = _step_alive(dyn, q, alive, streams)
        bad = alive & ~np.all(np.isfinite(q), axis=1)
        if bad.any():
            for m in np.flatnonzero(bad):
                failures.append((int(m), i))
            q[bad] = np.nan
            alive &= ~bad
        if (every and i % every == 0) or i == cfg.steps:
            snaps.append(Ensemble(q.copy(), t0 + i * cfg.dt))
    return Trajectory(snaps, failures)


def _step_alive(dyn, q, alive, streams):
    # dead members still consume their draws so live members keep their streams
    filler = np.where(alive[:, None], q, 0.0)
    new = dyn.step(filler, streams)
    return np.where(alive[:, None], new, np.nan)


def empirical_density(ens, grid: GridSpec, volumes=None) -> GridDensity:
    """Histogram of an ensemble on a grid.

    ``sum(P * volume)`` equals the fraction of members inside the grid;
    members outside are tallied in the returned density's ``overflow``.
    With ``volumes`` (e.g. a solver's ``sqrt(det g) dV`` weights) the values
    are densities with respect to that measure.
    """
    states = ens.states if isinstance(ens, Ensemble) else np.atleast_2d(np.asarray(ens, dtype=float))
    if states.shape[0] == 0:
        raise EmptyEnsemble("ensemble has no members")
    if states.shape[1] != grid.dims:
        raise DomainError(f"ensemble dim {states.shape[1]} != grid dims {grid.dims}")
    finite = np.all(np.isfinite(states), axis=1)
    edges = [grid.axis_edges(a) for a in range(grid.dims)]
    counts, _ = np.histogramdd(states[finite], bins=edges)
    inside = int(counts.sum())
    n = states.shape[0]
    dens = GridDensity(grid, np.zeros(grid.shape), volumes, overflow=n - inside)
    dens.values = counts / (n * dens.volumes)
    return dens
