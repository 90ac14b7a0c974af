"""Analytic mean losses U(q) and Gaussian gradient-noise models.

States are plain float arrays whose last axis is the trainable dimension
``K``; every landscape and noise model broadcasts over leading axes so an
ensemble of shape ``(N, K)`` or a grid of shape ``(nx, ny, K)`` can be
evaluated in one call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Sequence, Tuple, Union

import numpy as np

from .errors import DimensionMismatch, DomainError, NonFiniteState
from .spd import SpdMatrix, sqrt_factor

__all__ = [
    "as_state",
    "Quadratic",
    "DoubleWell",
    "Rosenbrock",
    "Flat",
    "LossLandscape",
    "IsotropicWhite",
    "DiagonalWhite",
    "FullCovariance",
    "StateDependentDiagonal",
    "NoiseModel",
    "potential",
    "gradient",
    "kappa_at",
    "sample_noise_gradient",
    "fd_check",
    "landscape_from_dict",
    "noise_from_dict",
    "DIAGONAL_MAPS",
]

DEFAULT_BOX = (-10.0, 10.0)


def as_state(q, dim=None) -> np.ndarray:
    """Validate a trainable state (or batch of states) and return it as floats."""
    q = np.atleast_1d(np.asarray(q, dtype=float))
    if dim is not None and q.shape[-1] != dim:
        raise DimensionMismatch(f"state has dimension {q.shape[-1]}, expected {dim}")
    if not np.all(np.isfinite(q)):
        raise NonFiniteState("state has non-finite entries")
    return q


# -- landscapes ---------------------------------------------------------------


@dataclass(frozen=True)
class Quadratic:
    """U(q) = 1/2 (q - c)^T H (q - c)."""

    hessian: SpdMatrix
    center: np.ndarray = None

    def __post_init__(self):
        h = self.hessian if isinstance(self.hessian, SpdMatrix) else SpdMatrix(self.hessian)
        object.__setattr__(self, "hessian", h)
        c = np.zeros(h.dim) if self.center is None else np.asarray(self.center, dtype=float)
        if c.shape != (h.dim,):
            raise DimensionMismatch(f"center shape {c.shape} does not match Hessian dim {h.dim}")
        object.__setattr__(self, "center", c)

    @property
    def dim(self) -> int:
        return self.hessian.dim

    def value(self, q):
        d = q - self.center
        return 0.5 * np.einsum("...i,ij,...j->...", d, self.hessian.entries, d)

    def gradient(self, q):
        return (q - self.center) @ self.hessian.entries

    def curvature_bound(self) -> float:
        return float(self.hessian._eig.eigenvalues[-1])

    def to_dict(self):
        return {
            "kind": "quadratic",
            "hessian": self.hessian.entries.tolist(),
            "center": self.center.tolist(),
        }


@dataclass(frozen=True)
class DoubleWell:
    """1D quartic double well with minima at +-spacing and barrier height ``barrier``."""

    barrier: float = 1.0
    spacing: float = 1.0

    def __post_init__(self):
        if not self.spacing > 0:
            raise DomainError("DoubleWell spacing must be positive")

    dim = 1

    def value(self, q):
        x = q[..., 0] / self.spacing
        return self.barrier * (x * x - 1.0) ** 2

    def gradient(self, q):
        s = self.spacing
        x = q / s
        return 4.0 * self.barrier * x * (x * x - 1.0) / s

    def curvature_bound(self) -> float:
        # U'' is unbounded; this is the curvature at the minima
        return 8.0 * abs(self.barrier) / self.spacing ** 2

    def to_dict(self):
        return {"kind": "double_well", "barrier": self.barrier, "spacing": self.spacing}


@dataclass(frozen=True)
class Rosenbrock:
    """U(x, y) = (a - x)^2 + b (y - x^2)^2."""

    a: float = 1.0
    b: float = 100.0

    dim = 2

    def value(self, q):
        x, y = q[..., 0], q[..., 1]
        return (self.a - x) ** 2 + self.b * (y - x * x) ** 2

    def gradient(self, q):
        x, y = q[..., 0], q[..., 1]
        r = y - x * x
        gx = -2.0 * (self.a - x) - 4.0 * self.b * x * r
        gy = 2.0 * self.b * r
        return np.stack([gx, gy], axis=-1)

    def curvature_bound(self) -> float:
        return 2.0 + 2.0 * self.b * (1.0 + 4.0 * self.a ** 2)

    def to_dict(self):
        return {"kind": "rosenbrock", "a": self.a, "b": self.b}


@dataclass(frozen=True)
class Flat:
    """Constant loss; used for pure-diffusion runs."""

    dim: int = 1
    level: float = 0.0

    def value(self, q):
        return np.full(np.shape(q)[:-1], float(self.level))

    def gradient(self, q):
        return np.zeros(np.shape(q))

    def curvature_bound(self) -> float:
        return 0.0

    def to_dict(self):
        return {"kind": "flat", "dim": self.dim, "level": self.level}


LossLandscape = Union[Quadratic, DoubleWell, Rosenbrock, Flat]


def _check_dim(land, q):
    q = np.asarray(q, dtype=float)
    if q.ndim == 0 or q.shape[-1] != land.dim:
        raise DimensionMismatch(
            f"state dimension {q.shape[-1] if q.ndim else 0} does not match landscape dimension {land.dim}"
        )
    return q


def potential(land: LossLandscape, q):
    """Mean loss U at ``q``; a float for a single state, an array for batches."""
    q = _check_dim(land, q)
    u = land.value(q)
    return float(u) if np.ndim(u) == 0 else u


def gradient(land: LossLandscape, q) -> np.ndarray:
    q = _check_dim(land, q)
    return np.asarray(land.gradient(q), dtype=float)


def fd_check(land: LossLandscape, q, h: float = 1e-5) -> float:
    """Largest relative error between the analytic gradient and central differences."""
    if not h > 0:
        raise DomainError("finite-difference step must be positive")
    q = _check_dim(land, q)
    g = gradient(land, q)
    fd = np.empty_like(g)
    for i in range(land.dim):
        e = np.zeros(land.dim)
        e[i] = h
        fd[..., i] = (land.value(q + e) - land.value(q - e)) / (2.0 * h)
    return float(np.max(np.abs(g - fd) / (np.abs(g) + 1e-12)))


# -- noise models -------------------------------------------------------------


@dataclass(frozen=True)
class IsotropicWhite:
    sigma: float
    dim: int = 1

    state_dependent = False

    def __post_init__(self):
        if self.sigma < 0:
            raise DomainError("sigma must be non-negative")

    def kappa_field(self, q):
        q = np.asarray(q)
        return np.broadcast_to(self.sigma ** 2 * np.eye(self.dim), q.shape[:-1] + (self.dim, self.dim))

    def sample(self, q, rng):
        q = np.asarray(q)
        return self.sigma * rng.standard_normal(q.shape)

    def to_dict(self):
        return {"kind": "isotropic", "sigma": self.sigma, "dim": self.dim}


@dataclass(frozen=True)
class DiagonalWhite:
    sigmas: Tuple[float, ...]

    state_dependent = False

    def __post_init__(self):
        s = tuple(float(x) for x in np.atleast_1d(self.sigmas))
        if any(x < 0 for x in s):
            raise DomainError("sigmas must be non-negative")
        object.__setattr__(self, "sigmas", s)

    @property
    def dim(self):
        return len(self.sigmas)

    def kappa_field(self, q):
        q = np.asarray(q)
        return np.broadcast_to(np.diag(np.square(self.sigmas)), q.shape[:-1] + (self.dim, self.dim))

    def sample(self, q, rng):
        q = np.asarray(q)
        return rng.standard_normal(q.shape) * np.asarray(self.sigmas)

    def to_dict(self):
        return {"kind": "diagonal", "sigmas": list(self.sigmas)}


@dataclass(frozen=True)
class FullCovariance:
    kappa: SpdMatrix

    state_dependent = False

    def __post_init__(self):
        if not isinstance(self.kappa, SpdMatrix):
            object.__setattr__(self, "kappa", SpdMatrix(self.kappa))
        object.__setattr__(self, "_factor", sqrt_factor(self.kappa))

    @property
    def dim(self):
        return self.kappa.dim

    def kappa_field(self, q):
        q = np.asarray(q)
        return np.broadcast_to(self.kappa.entries, q.shape[:-1] + (self.dim, self.dim))

    def sample(self, q, rng):
        q = np.asarray(q)
        z = rng.standard_normal(q.shape)
        return z @ self._factor.T

    def to_dict(self):
        return {"kind": "full", "kappa": self.kappa.entries.tolist()}


def _per_axis(value, dim):
    arr = np.broadcast_to(np.asarray(value, dtype=float), (dim,))
    return arr


def _quadratic_map(x, base=1.0, curvature=1.0, center=0.0):
    return base + curvature * (x - center) ** 2


def _gaussian_bump_map(x, base=1.0, amplitude=1.0, center=0.0, width=1.0):
    return base + amplitude * np.exp(-0.5 * ((x - center) / width) ** 2)


def _linear_map(x, base=1.0, slope=0.1):
    return base + slope * x


def _tanh_step_map(x, low=0.5, high=2.0, center=0.0, width=1.0):
    return low + (high - low) * 0.5 * (1.0 + np.tanh((x - center) / width))


# Separable variance profiles: kappa_ii(q) = f(q_i; params).
DIAGONAL_MAPS: Dict[str, Callable] = {
    "quadratic": _quadratic_map,
    "gaussian_bump": _gaussian_bump_map,
    "linear": _linear_map,
    "tanh_step": _tanh_step_map,
}


@dataclass(frozen=True)
class StateDependentDiagonal:
    """Diagonal covariance whose i-th variance is a named profile of q_i.

    Parameters may be scalars or per-coordinate sequences. Positivity is
    verified on the configured box at construction; evaluating outside
    the box raises :class:`DomainError`.
    """

    name: str
    dim: int = 1
    params: Dict[str, object] = field(default_factory=dict)
    box: Tuple[float, float] = DEFAULT_BOX

    state_dependent = True

    def __post_init__(self):
        if self.name not in DIAGONAL_MAPS:
            raise DomainError(f"unknown variance profile {self.name!r}; known: {sorted(DIAGONAL_MAPS)}")
        lo, hi = map(float, self.box)
        if not lo < hi:
            raise DomainError("box must satisfy lo < hi")
        object.__setattr__(self, "box", (lo, hi))
        object.__setattr__(self, "params", dict(self.params))
        probe = np.linspace(lo, hi, 2049)[:, None] * np.ones(self.dim)
        if np.min(self._variances(probe)) <= 0.0:
            raise DomainError(f"profile {self.name!r} is not positive on the box {self.box}")

    def _variances(self, q):
        fn = DIAGONAL_MAPS[self.name]
        kw = {k: _per_axis(v, self.dim) for k, v in self.params.items()}
        return fn(q, **kw)

    def kappa_field(self, q):
        q = np.asarray(q, dtype=float)
        lo, hi = self.box
        if np.any(q < lo) or np.any(q > hi):
            raise DomainError(f"state outside the noise model's box [{lo}, {hi}]")
        v = self._variances(q)
        out = np.zeros(q.shape + (self.dim,))
        idx = np.arange(self.dim)
        out[..., idx, idx] = v
        return out

    def sample(self, q, rng):
        q = np.asarray(q, dtype=float)
        v = np.diagonal(self.kappa_field(q), axis1=-2, axis2=-1)
        return np.sqrt(v) * rng.standard_normal(q.shape)

    def to_dict(self):
        params = {k: (np.asarray(v).tolist()) for k, v in self.params.items()}
        return {"kind": "state_diagonal", "name": self.name, "dim": self.dim,
                "params": params, "box": list(self.box)}


NoiseModel = Union[IsotropicWhite, DiagonalWhite, FullCovariance, StateDependentDiagonal]


def kappa_at(noise: NoiseModel, q) -> SpdMatrix:
    """Noise covariance at a single state as a validated SPD matrix."""
    q = np.asarray(q, dtype=float)
    if q.ndim != 1 or q.shape[0] != noise.dim:
        raise DimensionMismatch(f"expected a single state of dimension {noise.dim}")
    return SpdMatrix(noise.kappa_field(q))


def sample_noise_gradient(noise: NoiseModel, q, rng: np.random.Generator) -> np.ndarray:
    """One zero-mean Gaussian draw of the noise gradient with covariance kappa(q)."""
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != noise.dim:
        raise DimensionMismatch(f"state dimension {q.shape[-1]} does not match noise dimension {noise.dim}")
    return noise.sample(q, rng)


# -- config round-trip ----------------------------------------------------------


def landscape_from_dict(d) -> LossLandscape:
    d = dict(d)
    kind = d.pop("kind")
    if kind == "quadratic":
        h = np.atleast_2d(np.asarray(d.pop("hessian"), dtype=float))
        center = d.pop("center", None)
        _no_extra(d, kind)
        return Quadratic(SpdMatrix(h), None if center is None else np.atleast_1d(center))
    if kind == "double_well":
        return DoubleWell(**d)
    if kind == "rosenbrock":
        return Rosenbrock(**d)
    if kind == "flat":
        return Flat(**d)
    raise DomainError(f"unknown landscape kind {kind!r}")


def noise_from_dict(d) -> NoiseModel:
    d = dict(d)
    kind = d.pop("kind")
    if kind == "isotropic":
        return IsotropicWhite(**d)
    if kind == "diagonal":
        return DiagonalWhite(tuple(d.pop("sigmas")), **d)
    if kind == "full":
        return FullCovariance(SpdMatrix(d.pop("kappa")), **d)
    if kind == "state_diagonal":
        box = tuple(d.pop("box", DEFAULT_BOX))
        return StateDependentDiagonal(box=box, **d)
    raise DomainError(f"unknown noise kind {kind!r}")


def _no_extra(d, kind):
    if d:
        raise DomainError(f"unexpected keys for {kind}: {sorted(d)}")
