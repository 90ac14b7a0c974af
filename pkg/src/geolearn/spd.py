"""Symmetric positive-definite linear algebra and the metric family g(kappa).

Everything here works in the eigenbasis of the noise covariance: a metric
built from ``kappa`` shares its eigenvectors and only remaps eigenvalues,
so inverse metrics, the diffusion tensor ``g^-1 kappa g^-1`` and its square
root are all cheap once ``kappa`` is diagonalised.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import DomainError, NonConvergence, NotPositiveDefinite

__all__ = [
    "SpdMatrix",
    "EigenPair",
    "PowerLaw",
    "Interp12",
    "Interp123",
    "MetricSpec",
    "eig_decompose",
    "matrix_power",
    "metric_from_kappa",
    "metric_eigenvalue",
    "sqrt_factor",
    "LocalGeometry",
    "local_geometry",
    "jacobi_eigh",
]

SPD_RTOL = 1e-12
SYMMETRY_RTOL = 1e-12
JACOBI_MAX_SWEEPS = 100


def jacobi_eigh(a, max_sweeps=JACOBI_MAX_SWEEPS):
    """Cyclic Jacobi eigensolver for a real symmetric matrix.

    Parameters
    ----------
    a : array_like, shape (n, n)
        Symmetric matrix. Only the symmetric part is used.
    max_sweeps : int
        Budget of full cyclic sweeps over the upper triangle.

    Returns
    -------
    eigenvalues : ndarray, shape (n,)
        Ascending.
    basis : ndarray, shape (n, n)
        Orthonormal eigenvectors stored as columns.
    """
    a = np.array(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if n == 1 or scale == 0.0:
        return _sorted_pair(np.diag(a).copy(), v)

    tol = 1e-15 * scale
    mask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = float(np.sqrt(np.sum(a[mask] ** 2)))
        if off <= tol:
            return _sorted_pair(np.diag(a).copy(), v)
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300 or abs(apq) < 1e-18 * min(abs(a[p, p]), abs(a[q, q])):
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    off = float(np.sqrt(np.sum(a[mask] ** 2)))
    if off <= 1e-12 * scale:
        return _sorted_pair(np.diag(a).copy(), v)
    raise NonConvergence(
        f"Jacobi eigensolver did not converge in {max_sweeps} sweeps "
        f"(off-diagonal norm {off:.3e})"
    )


def _sorted_pair(w, v):
    order = np.argsort(w, kind="stable")
    return w[order], np.ascontiguousarray(v[:, order])


@dataclass(frozen=True)
class EigenPair:
    eigenvalues: np.ndarray
    basis: np.ndarray

    def reconstruct(self, values=None) -> np.ndarray:
        w = self.eigenvalues if values is None else values
        m = (self.basis * w) @ self.basis.T
        return 0.5 * (m + m.T)


class SpdMatrix:
    """Immutable, validated symmetric positive-definite matrix.

    Inputs whose asymmetry is below ``1e-12`` relative are symmetrised.
    Eigenvalues in ``(-tol, tol]`` with ``tol = 1e-12 * lambda_max`` are
    clamped to ``tol``; anything more negative is rejected.
    """

    __slots__ = ("_entries", "_eig")

    def __init__(self, entries):
        a = np.array(entries, dtype=float)
        if a.ndim == 0:
            a = a.reshape(1, 1)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
            raise DomainError(f"SpdMatrix needs a non-empty square matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise NotPositiveDefinite("matrix has non-finite entries")
        asym = np.max(np.abs(a - a.T))
        if asym > SYMMETRY_RTOL * max(np.max(np.abs(a)), 1.0):
            raise NotPositiveDefinite(f"matrix is not symmetric (max asymmetry {asym:.3e})")
        a = 0.5 * (a + a.T)
        w, v = jacobi_eigh(a)
        top = w[-1]
        if top <= 0.0:
            raise NotPositiveDefinite(f"largest eigenvalue {top:.3e} is not positive")
        tol = SPD_RTOL * top
        if w[0] <= -tol:
            raise NotPositiveDefinite(f"smallest eigenvalue {w[0]:.3e} is negative")
        if w[0] <= tol:
            w = np.where(w <= tol, tol, w)
            a = (v * w) @ v.T
            a = 0.5 * (a + a.T)
        a.setflags(write=False)
        w.setflags(write=False)
        v.setflags(write=False)
        self._entries = a
        self._eig = EigenPair(w, v)

    @classmethod
    def identity(cls, dim: int) -> "SpdMatrix":
        return cls(np.eye(dim))

    @classmethod
    def diag(cls, values) -> "SpdMatrix":
        return cls(np.diag(np.asarray(values, dtype=float)))

    @property
    def entries(self) -> np.ndarray:
        return self._entries

    @property
    def dim(self) -> int:
        return self._entries.shape[0]

    def __array__(self, dtype=None, copy=None):
        return np.array(self._entries, dtype=dtype)

    def __repr__(self):
        return f"SpdMatrix({self._entries.tolist()!r})"

    def __eq__(self, other):
        if isinstance(other, SpdMatrix):
            return np.array_equal(self._entries, other._entries)
        return NotImplemented

    __hash__ = None


ArrayOrSpd = Union[SpdMatrix, np.ndarray]


def _as_spd(a) -> SpdMatrix:
    return a if isinstance(a, SpdMatrix) else SpdMatrix(a)


# -- metric specifications -------------------------------------------------


@dataclass(frozen=True)
class PowerLaw:
    """g = kappa**alpha; alpha=1 natural gradient, 1/2 AdaBelief-like, 0 SGD."""

    alpha: float

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise DomainError(f"PowerLaw alpha must lie in [0, 1], got {self.alpha}")

    def map_eigenvalues(self, lam):
        lam = np.asarray(lam, dtype=float)
        if self.alpha == 0.0:
            return np.ones_like(lam)
        if self.alpha == 1.0:
            return lam.copy()
        if self.alpha == 0.5:
            return np.sqrt(lam)
        return lam ** self.alpha


@dataclass(frozen=True)
class Interp12:
    """g = sqrt(epsilon^2 + kappa): flat for small noise, square-root for large."""

    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0.0:
            raise DomainError(f"Interp12 epsilon must be positive, got {self.epsilon}")

    def map_eigenvalues(self, lam):
        lam = np.asarray(lam, dtype=float)
        return np.sqrt(self.epsilon ** 2 + lam)


@dataclass(frozen=True)
class Interp123:
    """g = sqrt(epsilon^2 + kappa + zeta^2 kappa^2), bridging alpha = 0, 1/2 and 1."""

    epsilon: float
    zeta: float

    def __post_init__(self):
        if not (self.epsilon > 0.0 and self.zeta > 0.0):
            raise DomainError(
                f"Interp123 needs positive epsilon and zeta, got {self.epsilon}, {self.zeta}"
            )

    def map_eigenvalues(self, lam):
        lam = np.asarray(lam, dtype=float)
        return np.sqrt(self.epsilon ** 2 + lam + (self.zeta * lam) ** 2)


MetricSpec = Union[PowerLaw, Interp12, Interp123]


def metric_spec_from_dict(d) -> MetricSpec:
    """Build a spec from ``{"kind": "power_law", "alpha": ...}``-style mappings."""
    d = dict(d)
    kind = d.pop("kind")
    builders = {"power_law": PowerLaw, "interp12": Interp12, "interp123": Interp123}
    if kind not in builders:
        raise DomainError(f"unknown metric kind {kind!r}; expected one of {sorted(builders)}")
    return builders[kind](**d)


def metric_spec_to_dict(spec: MetricSpec) -> dict:
    if isinstance(spec, PowerLaw):
        return {"kind": "power_law", "alpha": spec.alpha}
    if isinstance(spec, Interp12):
        return {"kind": "interp12", "epsilon": spec.epsilon}
    return {"kind": "interp123", "epsilon": spec.epsilon, "zeta": spec.zeta}


def _is_flat(spec) -> bool:
    return isinstance(spec, PowerLaw) and spec.alpha == 0.0


# -- operations --------------------------------------------------------------


def eig_decompose(a: ArrayOrSpd) -> EigenPair:
    """Eigen-decomposition with ascending eigenvalues and orthonormal columns."""
    return _as_spd(a)._eig


def matrix_power(a: ArrayOrSpd, alpha: float) -> SpdMatrix:
    if not math.isfinite(alpha):
        raise DomainError(f"alpha must be finite, got {alpha}")
    a = _as_spd(a)
    if alpha == 0.0:
        return SpdMatrix.identity(a.dim)
    if alpha == 1.0:
        return a
    eig = a._eig
    return SpdMatrix(eig.reconstruct(eig.eigenvalues ** alpha))


def metric_from_kappa(kappa: ArrayOrSpd, spec: MetricSpec) -> SpdMatrix:
    """Metric tensor for a given noise covariance.

    The flat spec short-circuits to the identity, so it also accepts a zero
    (noiseless) covariance.
    """
    if _is_flat(spec):
        dim = np.shape(np.asarray(kappa))[0] if not isinstance(kappa, SpdMatrix) else kappa.dim
        return SpdMatrix.identity(dim)
    eig = eig_decompose(kappa)
    return SpdMatrix(eig.reconstruct(spec.map_eigenvalues(eig.eigenvalues)))


def metric_eigenvalue(lambda_kappa: float, spec: MetricSpec) -> float:
    lam = float(lambda_kappa)
    if not lam > 0.0:
        raise DomainError(f"kappa eigenvalue must be positive, got {lambda_kappa}")
    return float(spec.map_eigenvalues(lam))


def sqrt_factor(a: ArrayOrSpd) -> np.ndarray:
    """Symmetric square root ``B`` with ``B @ B.T == a``."""
    eig = eig_decompose(a)
    return eig.reconstruct(np.sqrt(eig.eigenvalues))


# -- batched geometry ----------------------------------------------------------


@dataclass(frozen=True)
class LocalGeometry:
    """Metric-derived tensors at one point or over a batch of points.

    All arrays carry a leading batch shape ``S`` followed by the matrix axes:
    ``metric`` and ``inverse_metric`` and ``diffusion`` are ``S + (K, K)``;
    ``sqrt_det`` is ``S``. ``diffusion`` is ``g^-1 kappa g^-1`` and
    ``noise_factor`` its symmetric square root.
    """

    metric: np.ndarray
    inverse_metric: np.ndarray
    diffusion: np.ndarray
    noise_factor: np.ndarray
    sqrt_det: np.ndarray


def local_geometry(kappa, spec: MetricSpec) -> LocalGeometry:
    """Compute metric tensors from a (possibly batched) covariance field.

    ``kappa`` has shape ``S + (K, K)``. Diagonal fields are mapped
    elementwise; a field that is the same matrix everywhere is decomposed
    once; anything else falls back to a per-point Jacobi solve.
    """
    kappa = np.asarray(kappa, dtype=float)
    if kappa.ndim < 2 or kappa.shape[-1] != kappa.shape[-2]:
        raise DomainError(f"kappa field must end in a square matrix, got {kappa.shape}")
    k = kappa.shape[-1]
    batch = kappa.shape[:-2]
    offdiag = kappa * (1.0 - np.eye(k))
    if not np.any(offdiag):
        lam = np.diagonal(kappa, axis1=-2, axis2=-1)
        basis = np.broadcast_to(np.eye(k), batch + (k, k))
        return _geometry_from_eigen(lam, basis, spec, diagonal=True)
    flat = kappa.reshape((-1, k, k))
    if np.all(flat == flat[:1]):
        w, v = _psd_eigh(flat[0])
        lam = np.broadcast_to(w, batch + (k,))
        basis = np.broadcast_to(v, batch + (k, k))
        return _geometry_from_eigen(lam, basis, spec, diagonal=False)
    ws = np.empty((flat.shape[0], k))
    vs = np.empty((flat.shape[0], k, k))
    for i, m in enumerate(flat):
        ws[i], vs[i] = _psd_eigh(m)
    return _geometry_from_eigen(
        ws.reshape(batch + (k,)), vs.reshape(batch + (k, k)), spec, diagonal=False
    )


def _psd_eigh(m):
    w, v = jacobi_eigh(m)
    top = max(w[-1], 0.0)
    if w[0] < -SPD_RTOL * top or (top == 0.0 and w[0] < 0.0):
        raise NotPositiveDefinite(f"covariance has negative eigenvalue {w[0]:.3e}")
    return np.clip(w, 0.0, None), v


def _geometry_from_eigen(lam, basis, spec, diagonal):
    if _is_flat(spec):
        m = np.ones_like(lam)
    else:
        m = spec.map_eigenvalues(lam)
        if np.any(m <= 0.0):
            raise NotPositiveDefinite(
                "metric is singular: the covariance has a zero eigenvalue and the spec maps it to 0"
            )
    d = lam / (m * m)
    if diagonal:
        g = _diag_embed(m)
        ginv = _diag_embed(1.0 / m)
        diff = _diag_embed(d)
        fac = _diag_embed(np.sqrt(d))
    else:
        g = _rebuild(basis, m)
        ginv = _rebuild(basis, 1.0 / m)
        diff = _rebuild(basis, d)
        fac = _rebuild(basis, np.sqrt(d))
    sqrt_det = np.sqrt(np.prod(m, axis=-1))
    return LocalGeometry(g, ginv, diff, fac, sqrt_det)


def _diag_embed(x):
    k = x.shape[-1]
    out = np.zeros(x.shape + (k,))
    idx = np.arange(k)
    out[..., idx, idx] = x
    return out


def _rebuild(basis, w):
    m = np.einsum("...ik,...k,...jk->...ij", basis, w, basis)
    return 0.5 * (m + np.swapaxes(m, -1, -2))
