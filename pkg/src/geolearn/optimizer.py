"""Covariant gradient descent with an online noise-covariance estimate.

The estimator keeps an exponential moving average of the gradient and of
the outer products of deviations from that average (deviation from the
*updated* mean, as in AdaBelief). The metric ``g(kappa_hat)`` from a
:class:`~geolearn.spd.MetricSpec` preconditions the step
``q <- q - gamma g^-1 grad``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, DomainError, NonFiniteState
from .spd import Interp123, MetricSpec, PowerLaw, SpdMatrix, _is_flat, eig_decompose

__all__ = [
    "KappaEstimator",
    "update_kappa",
    "opt_step",
    "Optimizer",
    "OptRun",
    "BenchmarkRecord",
    "run_benchmark",
    "best_gamma",
    "PhaseMap",
    "phase_sweep",
    "REGIME_BANDS",
    "MAX_FULL_DIM",
]

MAX_FULL_DIM = 64
REGIME_BANDS = {"0": (-0.1, 0.1), "1/2": (0.4, 0.6), "1": (0.9, 1.1)}
LOG_STEP = 1e-4


@dataclass(frozen=True)
class KappaEstimator:
    """EMA estimate of the gradient-noise covariance.

    ``cov`` is a vector in diagonal mode and a matrix in full mode.
    """

    dim: int
    mode: str = "diagonal"
    decay: float = 0.99
    epsilon_floor: float = 1e-8
    mean: Optional[np.ndarray] = None
    cov: Optional[np.ndarray] = None
    count: int = 0

    def __post_init__(self):
        if self.mode not in ("diagonal", "full"):
            raise DomainError(f"estimator mode must be 'diagonal' or 'full', got {self.mode!r}")
        if not 0.0 <= self.decay < 1.0:
            raise DomainError("decay must lie in [0, 1)")
        if not self.epsilon_floor > 0:
            raise DomainError("epsilon_floor must be positive")
        if self.mode == "full" and self.dim > MAX_FULL_DIM:
            raise DomainError(f"full mode is limited to K <= {MAX_FULL_DIM}")
        if self.mean is None:
            object.__setattr__(self, "mean", np.zeros(self.dim))
        if self.cov is None:
            shape = (self.dim,) if self.mode == "diagonal" else (self.dim, self.dim)
            object.__setattr__(self, "cov", np.zeros(shape))

    @classmethod
    def fixed(cls, kappa, mode: str = "diagonal", epsilon_floor: float = 1e-8) -> "KappaEstimator":
        """Estimator pinned to a known covariance, e.g. ``kappa(q)`` at the current point.

        ``count`` is set past the warmup so an :class:`Optimizer` uses it at once.
        """
        k = kappa.entries if isinstance(kappa, SpdMatrix) else np.asarray(kappa, dtype=float)
        if k.ndim == 1:
            k = np.diag(k)
        dim = k.shape[0]
        cov = np.diag(k).copy() if mode == "diagonal" else 0.5 * (k + k.T)
        est = cls(dim, mode=mode, decay=0.0, epsilon_floor=epsilon_floor, cov=cov)
        return replace(est, count=est.warmup)

    @property
    def warmup(self) -> int:
        """Steps before the estimate is trusted: ``ceil(1 / (1 - decay))``."""
        return int(math.ceil(1.0 / (1.0 - self.decay) - 1e-9))

    def kappa(self) -> SpdMatrix:
        """``cov + epsilon_floor * I`` as a validated SPD matrix."""
        if self.mode == "diagonal":
            return SpdMatrix.diag(self.cov + self.epsilon_floor)
        return SpdMatrix(self.cov + self.epsilon_floor * np.eye(self.dim))

    def kappa_diagonal(self) -> np.ndarray:
        if self.mode != "diagonal":
            return np.diag(self.kappa().entries).copy()
        return self.cov + self.epsilon_floor


def update_kappa(est: KappaEstimator, grad_sample) -> KappaEstimator:
    g = np.asarray(grad_sample, dtype=float)
    if g.shape != (est.dim,):
        raise DimensionMismatch(f"gradient shape {g.shape} != ({est.dim},)")
    d = est.decay
    mean = d * est.mean + (1.0 - d) * g
    dev = g - mean
    if est.mode == "diagonal":
        cov = d * est.cov + (1.0 - d) * dev * dev
    else:
        cov = d * est.cov + (1.0 - d) * np.outer(dev, dev)
        cov = 0.5 * (cov + cov.T)
    return replace(est, mean=mean, cov=cov, count=est.count + 1)


def _preconditioned(grad, est: KappaEstimator, spec: MetricSpec):
    if est.mode == "diagonal":
        return grad / spec.map_eigenvalues(est.kappa_diagonal())
    eig = eig_decompose(est.kappa())
    g_eig = spec.map_eigenvalues(eig.eigenvalues)
    return eig.basis @ ((eig.basis.T @ grad) / g_eig)


def opt_step(q, grad, est: KappaEstimator, spec: MetricSpec, gamma: float) -> np.ndarray:
    """``q - gamma g(kappa_hat)^-1 grad``; the flat spec is exactly ``q - gamma grad``."""
    q = np.asarray(q, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if q.shape != grad.shape or q.shape != (est.dim,):
        raise DimensionMismatch("q, grad and estimator must share one dimension")
    if _is_flat(spec):
        return q - gamma * grad
    return q - gamma * _preconditioned(grad, est, spec)


def _metric_eigenvalues(est: KappaEstimator, spec: MetricSpec) -> np.ndarray:
    if _is_flat(spec):
        return np.ones(est.dim)
    if est.mode == "diagonal":
        return np.sort(spec.map_eigenvalues(est.kappa_diagonal()))
    return spec.map_eigenvalues(eig_decompose(est.kappa()).eigenvalues)


class Optimizer:
    """Stateful wrapper: observe a gradient sample, then step.

    For the first ``estimator.warmup`` observations the flat metric is
    used because the estimate is not yet trusted.
    """

    def __init__(self, spec: MetricSpec, gamma: float, estimator: KappaEstimator):
        if not gamma > 0:
            raise DomainError("gamma must be positive")
        self.spec, self.gamma, self.est = spec, float(gamma), estimator

    @property
    def warmed_up(self) -> bool:
        return self.est.count >= self.est.warmup

    def observe(self, grad_sample) -> None:
        self.est = update_kappa(self.est, grad_sample)

    def step(self, q, grad_sample) -> np.ndarray:
        self.observe(grad_sample)
        spec = self.spec if self.warmed_up else PowerLaw(0.0)
        return opt_step(q, grad_sample, self.est, spec, self.gamma)

    def metric_eigenvalues(self) -> np.ndarray:
        return _metric_eigenvalues(self.est, self.spec if self.warmed_up else PowerLaw(0.0))


@dataclass(frozen=True)
class OptRun:
    landscape: object
    noise: Optional[object]
    spec: MetricSpec
    gamma: float
    steps: int
    q0: Sequence[float]
    seed: int = 0
    record_every: int = 1
    mode: str = "diagonal"
    decay: float = 0.99
    epsilon_floor: float = 1e-8
    grad_tol: float = 1e-6

    def __post_init__(self):
        if not self.gamma > 0:
            raise DomainError("gamma must be positive")
        if self.steps < 0 or self.record_every < 1:
            raise DomainError("steps must be >= 0 and record_every >= 1")


@dataclass
class BenchmarkRecord:
    columns: List[str]
    rows: List[list]
    steps_to_tol: Optional[int]  # first step with |grad U| < grad_tol, None if never
    final_state: np.ndarray

    def column(self, name: str) -> np.ndarray:
        return np.array([r[self.columns.index(name)] for r in self.rows])


def run_benchmark(run: OptRun) -> BenchmarkRecord:
    """Optimise ``run.landscape`` from ``run.q0`` with noisy gradient samples.

    Columns: ``step``, ``loss``, ``grad_norm`` and ``metric_eig_<i>`` for
    the eigenvalues of the metric in use at that step.
    """
    land = run.landscape
    q = np.array(run.q0, dtype=float)
    if q.shape != (land.dim,):
        raise DimensionMismatch(f"q0 has shape {q.shape}, landscape dim is {land.dim}")
    rng = np.random.default_rng(np.random.SeedSequence([int(run.seed), 0x0B7]))
    opt = Optimizer(run.spec, run.gamma, KappaEstimator(land.dim, run.mode, run.decay, run.epsilon_floor))
    columns = ["step", "loss", "grad_norm"] + [f"metric_eig_{i}" for i in range(land.dim)]
    rows = []
    hit = None

    def record(i, grad_norm):
        rows.append([i, float(land.value(q)), grad_norm] + opt.metric_eigenvalues().tolist())

    grad = np.asarray(land.gradient(q), dtype=float)
    gn = float(np.linalg.norm(grad))
    if gn < run.grad_tol:
        hit = 0
    record(0, gn)
    for i in range(1, run.steps + 1):
        sample = grad if run.noise is None else grad + run.noise.sample(q, rng)
        q = opt.step(q, sample)
        if not np.all(np.isfinite(q)):
            raise NonFiniteState(f"optimizer state became non-finite at step {i}", step=i)
        grad = np.asarray(land.gradient(q), dtype=float)
        gn = float(np.linalg.norm(grad))
        if hit is None and gn < run.grad_tol:
            hit = i
        if i % run.record_every == 0 or i == run.steps:
            record(i, gn)
    return BenchmarkRecord(columns, rows, hit, q)


def best_gamma(run: OptRun, gammas: Sequence[float]):
    """Fixed learning rate reaching the gradient tolerance in the fewest steps.

    Returns ``(gamma, steps)``; ``steps`` is None when no candidate converges.
    Candidates that diverge (non-finite, or leaving the noise model's box)
    count as not converging.
    """
    best = (None, None)
    for g in gammas:
        try:
            rec = run_benchmark(replace(run, gamma=float(g), record_every=max(run.steps, 1)))
        except (NonFiniteState, FloatingPointError, DomainError):
            continue
        n = rec.steps_to_tol
        if n is not None and (best[1] is None or n < best[1]):
            best = (float(g), n)
    return best


# -- phase sweep ----------------------------------------------------------------


@dataclass
class PhaseMap:
    """Effective exponent on the grid ``epsilons x zetas x kappa_eigenvalues``."""

    epsilons: np.ndarray
    zetas: np.ndarray
    kappa_eigenvalues: np.ndarray
    lambda_g: np.ndarray
    alpha_eff: np.ndarray
    regime: np.ndarray  # "0", "1/2", "1" or "" (between bands)

    def band(self, i: int, j: int, regime: str = "1/2") -> np.ndarray:
        """Eigenvalues classified into ``regime`` for the pair ``(epsilons[i], zetas[j])``."""
        return self.kappa_eigenvalues[self.regime[i, j] == regime]

    def band_decades(self, i: int, j: int, regime: str = "1/2") -> float:
        """``log10(max / min)`` over the band; 0 for an empty or single-point band."""
        b = self.band(i, j, regime)
        return float(np.log10(b.max() / b.min())) if b.size else 0.0

    def rows(self):
        for i, e in enumerate(self.epsilons):
            for j, z in enumerate(self.zetas):
                for k, lam in enumerate(self.kappa_eigenvalues):
                    yield (float(e), float(z), float(lam), float(self.lambda_g[i, j, k]),
                           float(self.alpha_eff[i, j, k]), str(self.regime[i, j, k]))


def _classify(alpha):
    out = np.full(alpha.shape, "", dtype=object)
    for label, (lo, hi) in REGIME_BANDS.items():
        out[(alpha >= lo) & (alpha <= hi)] = label
    return out


def _positive(name, x):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.size == 0 or not np.all(x > 0) or not np.all(np.isfinite(x)):
        raise DomainError(f"{name} must be non-empty, finite and positive")
    return x


def phase_sweep(epsilons, zetas, kappa_eigenvalues) -> PhaseMap:
    """``alpha_eff = d ln lambda_g / d ln lambda_kappa`` for the three-regime metric.

    The derivative is a central difference in ``ln lambda_kappa`` with step
    ``1e-4``; regimes use the bands in :data:`REGIME_BANDS`.
    """
    eps = _positive("epsilons", epsilons)
    zet = _positive("zetas", zetas)
    lam = _positive("kappa_eigenvalues", kappa_eigenvalues)
    lg = np.empty((eps.size, zet.size, lam.size))
    al = np.empty_like(lg)
    up, dn = lam * math.exp(LOG_STEP), lam * math.exp(-LOG_STEP)
    for i, e in enumerate(eps):
        for j, z in enumerate(zet):
            spec = Interp123(float(e), float(z))
            lg[i, j] = spec.map_eigenvalues(lam)
            al[i, j] = (np.log(spec.map_eigenvalues(up)) - np.log(spec.map_eigenvalues(dn))) / (2 * LOG_STEP)
    return PhaseMap(eps, zet, lam, lg, al, _classify(al))



# -- self-checks ------------------------------------------------------------------


def _random_spd(rng, dim, cond):
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return (q * np.geomspace(1.0, cond, dim)) @ q.T


def reparametrization_gap(transform, hessian, noise_cov, gamma: float = 0.05, steps: int = 50,
                          warm: int = 2000, seed: int = 0, decay: float = 0.99,
                          epsilon_floor: float = 1e-12) -> float:
    """Largest ``|T^-1 q~_t - q_t|`` between natural-gradient runs in two coordinate systems.

    Both runs see the same noise draws, mapped as covectors
    (``xi~ = T^-T xi``), on ``U = q^T H q / 2`` from a shared start. The
    estimators are warmed up on noise-only samples first.
    """
    t = np.asarray(transform, dtype=float)
    h = np.asarray(hessian, dtype=float)
    dim = h.shape[0]
    t_inv_t = np.linalg.inv(t).T
    chol = np.linalg.cholesky(np.asarray(noise_cov, dtype=float))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7E9]))
    spec = PowerLaw(1.0)
    est = KappaEstimator(dim, "full", decay, epsilon_floor)
    a, b = Optimizer(spec, gamma, est), Optimizer(spec, gamma, est)
    for _ in range(warm):
        xi = chol @ rng.standard_normal(dim)
        a.observe(xi)
        b.observe(t_inv_t @ xi)
    q = np.ones(dim)
    qt = t @ q
    gap = 0.0
    for _ in range(steps):
        xi = chol @ rng.standard_normal(dim)
        q = a.step(q, h @ q + xi)
        qt = b.step(qt, t_inv_t @ (h @ np.linalg.solve(t, qt) + xi))
        gap = max(gap, float(np.max(np.abs(np.linalg.solve(t, qt) - q))))
    return gap


def regime_reductions(dim: int = 3, seed: int = 0) -> Dict[str, float]:
    """Numerical checks that the metric family reduces to its named limits.

    Returns the number of entries where the flat step differs from
    ``q - gamma grad``, the largest relative error of the diagonal
    square-root step against ``grad / sqrt(kappa_ii)``, the largest
    relative error of the natural-gradient step against a direct solve
    with ``kappa_hat``, and the reparametrisation gap.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xAED]))
    gamma = 0.1
    q = rng.standard_normal(dim)
    grad = rng.standard_normal(dim)
    est = KappaEstimator(dim, "diagonal", 0.9)
    for _ in range(100):
        est = update_kappa(est, rng.standard_normal(dim) * rng.uniform(0.5, 3.0, dim))
    flat = opt_step(q, grad, est, PowerLaw(0.0), gamma)
    mismatches = int(np.sum(flat != q - gamma * grad))
    half = opt_step(q, grad, est, PowerLaw(0.5), gamma)
    ref = q - gamma * grad / np.sqrt(est.cov + est.epsilon_floor)
    sqrt_err = float(np.max(np.abs(half - ref) / np.maximum(np.abs(ref), 1e-300)))
    full = KappaEstimator(dim, "full", 0.9)
    for _ in range(100):
        full = update_kappa(full, _random_spd(rng, dim, 5.0) @ rng.standard_normal(dim))
    nat = opt_step(q, grad, full, PowerLaw(1.0), gamma)
    kap = full.cov + full.epsilon_floor * np.eye(dim)
    ref_nat = q - gamma * np.linalg.solve(kap, grad)
    nat_err = float(np.max(np.abs(nat - ref_nat)) / np.max(np.abs(ref_nat)))
    while True:
        t = rng.standard_normal((dim, dim)) + 2.0 * np.eye(dim)
        if np.linalg.cond(t) < 10:
            break
    gap = reparametrization_gap(t, _random_spd(rng, dim, 10.0), _random_spd(rng, dim, 4.0), seed=seed)
    return {
        "flat_step_mismatches": mismatches,
        "sqrt_step_rel_error": sqrt_err,
        "natural_step_rel_error": nat_err,
        "reparametrization_gap": gap,
    }
