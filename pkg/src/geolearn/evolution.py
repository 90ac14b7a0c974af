"""Jump-and-acceptance Markov chains and their mean-trait (Lande) limit.

A transition ``q -> q'`` happens with probability ``P_j(|q' - q|) P_a(q', q)``:
a symmetric Gaussian jump followed by a sigmoid or Metropolis acceptance
on the loss difference. Both acceptance rules satisfy detailed balance for
the canonical ensemble ``exp(-beta H) / Z``. For small selection strength
the ensemble mean follows ``dq/dt = -(beta/4) C grad H``, one proposal per
unit of time.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit, log_expit

from .errors import DegenerateRatio, DimensionMismatch, DomainError, ExpansionRegimeViolated
from .spd import SpdMatrix, jacobi_eigh

__all__ = [
    "JumpModel",
    "AcceptanceRule",
    "ChainResult",
    "LandeComparison",
    "propose_jump",
    "acceptance_probability",
    "detailed_balance_ratio",
    "evolve_chain",
    "evolve_chains",
    "lande_rhs",
    "lande_ode",
    "lande_vs_chain",
]

SMALL_BETA_LIMIT = 0.3


@dataclass(frozen=True)
class JumpModel:
    """Zero-mean Gaussian jumps with covariance ``C`` (``C = 0`` freezes the chain)."""

    covariance: np.ndarray
    kind: str = "full-Gaussian"

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if c.shape[0] != c.shape[1]:
            raise DomainError("jump covariance must be square")
        if self.kind not in ("isotropic-Gaussian", "full-Gaussian"):
            raise DomainError(f"unknown jump kind {self.kind!r}")
        c = 0.5 * (c + c.T)
        if self.kind == "isotropic-Gaussian" and np.any(c != c[0, 0] * np.eye(c.shape[0])):
            raise DomainError("isotropic jumps need a covariance proportional to the identity")
        w, v = jacobi_eigh(c)
        if w[0] < -1e-12 * max(w[-1], 0.0) or (w[-1] <= 0 and w[0] < 0):
            raise DomainError("jump covariance must be positive semi-definite")
        w = np.clip(w, 0.0, None)
        c.setflags(write=False)
        object.__setattr__(self, "covariance", c)
        object.__setattr__(self, "_factor", (v * np.sqrt(w)) @ v.T)
        object.__setattr__(self, "_lam_max", float(w[-1]))

    @classmethod
    def isotropic(cls, sigma: float, dim: int = 1) -> "JumpModel":
        return cls(sigma ** 2 * np.eye(dim), "isotropic-Gaussian")

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    @property
    def lam_max(self) -> float:
        return self._lam_max

    def draw(self, rng, size=None) -> np.ndarray:
        shape = (self.dim,) if size is None else tuple(np.atleast_1d(size)) + (self.dim,)
        return rng.standard_normal(shape) @ self._factor.T

    def to_dict(self):
        return {"covariance": self.covariance.tolist(), "kind": self.kind}


@dataclass(frozen=True)
class AcceptanceRule:
    kind: str = "sigmoid"
    beta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("sigmoid", "metropolis"):
            raise DomainError(f"acceptance kind must be 'sigmoid' or 'metropolis', got {self.kind!r}")
        if not self.beta >= 0:
            raise DomainError("beta must be non-negative")


def propose_jump(q, jm: JumpModel, rng) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != jm.dim:
        raise DimensionMismatch(f"state dim {q.shape[-1]} != jump dim {jm.dim}")
    return q + jm.draw(rng, q.shape[:-1] or None)


def acceptance_probability(h_old, h_new, rule: AcceptanceRule):
    """Sigmoid ``1/(1+exp(-beta(h_old-h_new)))`` or Metropolis ``min(1, exp(beta(h_old-h_new)))``."""
    x = rule.beta * (np.asarray(h_old, dtype=float) - np.asarray(h_new, dtype=float))
    if rule.kind == "sigmoid":
        p = expit(x)
    else:
        p = np.exp(np.minimum(x, 0.0))
    return float(p) if np.ndim(p) == 0 else p


def _log_acceptance(x, kind):
    return log_expit(x) if kind == "sigmoid" else np.minimum(x, 0.0)


def detailed_balance_ratio(q, q_prime, land, rule: AcceptanceRule):
    """``[P_a(q'<-q) / P_a(q<-q')] / [P_e(q') / P_e(q)]``; equals 1 under detailed balance.

    The symmetric jump kernel cancels. The quotient is formed in log space
    so large loss gaps do not lose precision.
    """
    h = np.asarray(land.value(np.asarray(q, dtype=float)), dtype=float)
    hp = np.asarray(land.value(np.asarray(q_prime, dtype=float)), dtype=float)
    fwd = acceptance_probability(h, hp, rule)
    bwd = acceptance_probability(hp, h, rule)
    if np.any(np.asarray(fwd) == 0.0) or np.any(np.asarray(bwd) == 0.0):
        raise DegenerateRatio("an acceptance probability underflowed to zero")
    x = rule.beta * (h - hp)
    log_ratio = _log_acceptance(x, rule.kind) - _log_acceptance(-x, rule.kind)
    log_eq = -rule.beta * hp + rule.beta * h
    r = np.exp(log_ratio - log_eq)
    return float(r) if np.ndim(r) == 0 else r


@dataclass
class ChainResult:
    samples: np.ndarray  # (steps + 1, K) including the start
    accepted: np.ndarray  # (steps,) bool
    burn_in: int

    @property
    def post_burn_in(self) -> np.ndarray:
        return self.samples[self.burn_in + 1:]

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted)) if self.accepted.size else 0.0


def evolve_chain(q0, land, jm: JumpModel, rule: AcceptanceRule, steps: int, rng,
                 burn_in_fraction: float = 0.1) -> ChainResult:
    """Run one chain for ``steps`` proposals.

    Jumps and uniforms are drawn up front in one block each, so a given
    ``rng`` state fixes every proposal regardless of the acceptance history.
    """
    q = np.array(np.atleast_1d(q0), dtype=float)
    if q.shape != (jm.dim,) or land.dim != jm.dim:
        raise DimensionMismatch("q0, landscape and jump model must share one dimension")
    if not 0.0 <= burn_in_fraction < 1.0:
        raise DomainError("burn_in_fraction must lie in [0, 1)")
    jumps = jm.draw(rng, steps) if steps else np.zeros((0, jm.dim))
    u = rng.random(steps)
    samples = np.empty((steps + 1, jm.dim))
    samples[0] = q
    accepted = np.zeros(steps, dtype=bool)
    beta = rule.beta
    sigmoid = rule.kind == "sigmoid"
    value = land.value
    h = float(value(q))
    for i in range(steps):
        cand = q + jumps[i]
        hn = float(value(cand))
        x = beta * (h - hn)
        if sigmoid:
            p = 1.0 / (1.0 + math.exp(-x)) if x > -700.0 else 0.0
        else:
            p = 1.0 if x >= 0.0 else math.exp(x)
        if u[i] < p:
            q = cand
            h = hn
            accepted[i] = True
        samples[i + 1] = q
    return ChainResult(samples, accepted, int(burn_in_fraction * steps))


def evolve_chains(q0, land, jm: JumpModel, rule: AcceptanceRule, steps: int, rng,
                  record_every: int = 1):
    """Vectorised independent chains; ``q0`` has shape ``(M, K)``.

    Returns ``(times, states)`` with states recorded every ``record_every``
    proposals, shape ``(n_records, M, K)``.
    """
    q = np.array(np.atleast_2d(q0), dtype=float)
    h = np.asarray(land.value(q), dtype=float)
    times, states = [0], [q.copy()]
    for i in range(1, steps + 1):
        cand = q + jm.draw(rng, q.shape[0])
        hn = np.asarray(land.value(cand), dtype=float)
        acc = rng.random(q.shape[0]) < acceptance_probability(h, hn, rule)
        q = np.where(acc[:, None], cand, q)
        h = np.where(acc, hn, h)
        if i % record_every == 0 or i == steps:
            times.append(i)
            states.append(q.copy())
    return np.array(times), np.array(states)


def lande_rhs(q_mean, jm: JumpModel, land, beta: float) -> np.ndarray:
    """Mean-trait velocity ``-(beta/4) C grad H(q_mean)``."""
    q = np.asarray(q_mean, dtype=float)
    if q.shape[-1] != jm.dim or land.dim != jm.dim:
        raise DimensionMismatch("q_mean, landscape and jump model must share one dimension")
    return -(beta / 4.0) * (np.asarray(land.gradient(q), dtype=float) @ jm.covariance.T)


def lande_ode(q0, jm: JumpModel, land, beta: float, times, substeps: int = 8) -> np.ndarray:
    """RK4 solution of the mean-trait ODE sampled at ``times`` (ascending, starting at 0)."""
    times = np.asarray(times, dtype=float)
    q = np.array(np.atleast_1d(q0), dtype=float)
    out = np.empty((times.size, q.size))
    t = 0.0
    for k, target in enumerate(times):
        span = target - t
        if span > 0:
            n = max(1, int(math.ceil(span * substeps)))
            h = span / n
            for _ in range(n):
                k1 = lande_rhs(q, jm, land, beta)
                k2 = lande_rhs(q + 0.5 * h * k1, jm, land, beta)
                k3 = lande_rhs(q + 0.5 * h * k2, jm, land, beta)
                k4 = lande_rhs(q + h * k3, jm, land, beta)
                q = q + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            t = target
        out[k] = q
    return out


@dataclass
class LandeComparison:
    times: np.ndarray
    ode_mean: np.ndarray
    chain_mean: np.ndarray
    stderr: np.ndarray
    max_deviation: float
    max_z: float
    expansion_parameter: float  # max of beta sqrt(lam_max C) |grad H| along the ODE path

    @property
    def within(self) -> np.ndarray:
        """Per-snapshot, per-coordinate |chain - ODE| in units of the standard error."""
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.abs(self.chain_mean - self.ode_mean) / self.stderr
        return np.where(self.stderr > 0, z, np.where(self.chain_mean == self.ode_mean, 0.0, np.inf))

    def to_dict(self):
        return {
            "times": self.times.tolist(),
            "ode_mean": self.ode_mean.tolist(),
            "chain_mean": self.chain_mean.tolist(),
            "stderr": self.stderr.tolist(),
            "max_deviation": self.max_deviation,
            "max_z": self.max_z,
            "expansion_parameter": self.expansion_parameter,
        }


def lande_vs_chain(q0, land, jm: JumpModel, rule: AcceptanceRule, beta: Optional[float],
                   horizon: int, ensemble_size: int, snapshots: int = 20, seed: int = 0) -> LandeComparison:
    """Compare the chain ensemble mean with the mean-trait ODE.

    ``beta`` overrides ``rule.beta`` when given. Emits
    :class:`ExpansionRegimeViolated` when
    ``beta * sqrt(lam_max(C)) * |grad H|`` reaches 0.3 on the ODE path.
    """
    beta = rule.beta if beta is None else float(beta)
    rule = AcceptanceRule(rule.kind, beta)
    if snapshots < 1 or horizon < snapshots:
        raise DomainError("need horizon >= snapshots >= 1")
    snap_times = np.unique(np.round(np.linspace(0, horizon, snapshots + 1)[1:]).astype(int))
    times = np.concatenate([[0], snap_times])
    ode = lande_ode(q0, jm, land, beta, times)
    dense = lande_ode(q0, jm, land, beta, np.arange(horizon + 1))
    grad_norm = np.linalg.norm(np.asarray(land.gradient(dense), dtype=float), axis=-1)
    expansion = float(beta * math.sqrt(jm.lam_max) * grad_norm.max())
    if expansion >= SMALL_BETA_LIMIT:
        warnings.warn(
            f"small-selection expansion parameter reaches {expansion:.3g} (>= {SMALL_BETA_LIMIT})",
            ExpansionRegimeViolated,
            stacklevel=2,
        )
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1A2DE]))
    start = np.tile(np.atleast_1d(np.asarray(q0, dtype=float)), (ensemble_size, 1))
    rec_t, rec = evolve_chains(start, land, jm, rule, horizon, rng, record_every=1)
    chosen = rec[times]
    chain_mean = chosen.mean(axis=1)
    stderr = chosen.std(axis=1, ddof=1) / math.sqrt(ensemble_size) if ensemble_size > 1 else np.zeros_like(chain_mean)
    dev = np.abs(chain_mean - ode)
    cmp = LandeComparison(times.astype(float), ode, chain_mean, stderr, float(dev[1:].max()), 0.0, expansion)
    cmp.max_z = float(cmp.within[1:].max())
    return cmp
