import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from geolearn.errors import DegenerateRatio, DimensionMismatch, DomainError, ExpansionRegimeViolated
from geolearn.evolution import (
    AcceptanceRule,
    JumpModel,
    acceptance_probability,
    detailed_balance_ratio,
    evolve_chain,
    evolve_chains,
    lande_ode,
    lande_rhs,
    lande_vs_chain,
    propose_jump,
)
from geolearn.landscape import DoubleWell, Flat, Quadratic, Rosenbrock
from geolearn.spd import SpdMatrix

from oracles import canonical_moments_1d, random_spd


class Tilted:
    """Double well plus a linear tilt, so the two wells carry unequal mass."""

    dim = 1

    def __init__(self, barrier, tilt, shift=0.0):
        self.barrier, self.tilt, self.shift = barrier, tilt, shift

    def value(self, q):
        x = q[..., 0]
        return self.barrier * (x * x - 1.0) ** 2 + self.tilt * x + self.shift

    def gradient(self, q):
        x = q
        return 4.0 * self.barrier * x * (x * x - 1.0) + self.tilt


# -- jumps -----------------------------------------------------------------------------


def test_jump_moments():
    rng = np.random.default_rng(0)
    c = np.array([[2.0, 0.5], [0.5, 1.0]])
    jm = JumpModel(c)
    x = propose_jump(np.zeros((100000, 2)), jm, rng)
    se = x.std(axis=0) / np.sqrt(x.shape[0])
    assert np.all(np.abs(x.mean(axis=0)) < 3 * se)
    np.testing.assert_allclose(np.cov(x, rowvar=False), c, rtol=0.05, atol=0.05 * 0.5)


def test_isotropic_squared_jump_length():
    rng = np.random.default_rng(1)
    sigma, k = 0.7, 3
    x = propose_jump(np.zeros((100000, k)), JumpModel.isotropic(sigma, k), rng)
    assert np.mean(np.sum(x * x, axis=1)) == pytest.approx(k * sigma ** 2, rel=0.05)


def test_zero_covariance_and_reproducibility():
    jm = JumpModel(np.zeros((2, 2)))
    q = np.array([1.0, -2.0])
    np.testing.assert_array_equal(propose_jump(q, jm, np.random.default_rng(0)), q)
    jm = JumpModel.isotropic(1.0, 2)
    a = propose_jump(q, jm, np.random.default_rng(5))
    b = propose_jump(q, jm, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_jump_model_validation():
    with pytest.raises(DomainError):
        JumpModel([[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(DomainError):
        JumpModel(np.diag([1.0, 2.0]), "isotropic-Gaussian")
    with pytest.raises(DomainError):
        AcceptanceRule("glauber")
    with pytest.raises(DimensionMismatch):
        propose_jump([0.0], JumpModel.isotropic(1.0, 2), np.random.default_rng(0))


# -- acceptance --------------------------------------------------------------------------


def test_acceptance_examples():
    assert acceptance_probability(1.0, 1.0, AcceptanceRule("sigmoid", 1.0)) == 0.5
    assert acceptance_probability(1.0, 1.0, AcceptanceRule("metropolis", 1.0)) == 1.0
    assert acceptance_probability(1.0, 0.0, AcceptanceRule("sigmoid", 2.0)) == pytest.approx(1 / (1 + math.exp(-2)),
                                                                                           abs=1e-15)
    assert acceptance_probability(0.0, 1e6, AcceptanceRule("sigmoid", 1.0)) == 0.0
    assert acceptance_probability(1e6, 0.0, AcceptanceRule("sigmoid", 1.0)) == 1.0
    assert acceptance_probability(0.0, 1e6, AcceptanceRule("metropolis", 1.0)) == 0.0


@given(st.floats(-1e300, 1e300), st.floats(-1e300, 1e300), st.floats(0, 1e3), st.sampled_from(["sigmoid", "metropolis"]))
def test_acceptance_is_a_probability(a, b, beta, kind):
    with np.errstate(over="ignore", invalid="ignore"):
        p = acceptance_probability(a, b, AcceptanceRule(kind, beta))
    if math.isfinite(beta * (a - b)):
        assert 0.0 <= p <= 1.0


# -- detailed balance ---------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["sigmoid", "metropolis"])
@pytest.mark.parametrize("land", [
    Quadratic(SpdMatrix([[2.0, 0.3], [0.3, 1.0]])),
    Rosenbrock(1.0, 2.0),
])
def test_detailed_balance_random_pairs(kind, land):
    rng = np.random.default_rng(2)
    q = rng.uniform(-1.5, 1.5, (10000, land.dim))
    qp = q + rng.normal(0, 0.5, q.shape)
    r = detailed_balance_ratio(q, qp, land, AcceptanceRule(kind, 1.3))
    assert np.max(np.abs(r - 1.0)) < 1e-12


def test_detailed_balance_constant_landscape_and_degenerate_case():
    assert detailed_balance_ratio([0.0, 0.0], [1.0, 2.0], Flat(2, 5.0), AcceptanceRule("sigmoid", 3.0)) == 1.0
    with pytest.raises(DegenerateRatio):
        detailed_balance_ratio([0.0], [100.0], DoubleWell(1.0, 1.0), AcceptanceRule("sigmoid", 1.0))


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.01, 5.0), st.sampled_from(["sigmoid", "metropolis"]))
def test_detailed_balance_property(x, y, beta, kind):
    r = detailed_balance_ratio([x], [y], DoubleWell(1.5, 1.2), AcceptanceRule(kind, beta))
    assert abs(r - 1.0) < 1e-12


# -- chains --------------------------------------------------------------------------------


def test_frozen_chain_never_moves():
    res = evolve_chain([0.5], DoubleWell(), JumpModel([[0.0]]), AcceptanceRule(), 100, np.random.default_rng(0))
    assert np.all(res.samples == 0.5)


def test_quadratic_chain_variance():
    land = Quadratic(SpdMatrix([[1.0]]))
    res = evolve_chain([0.0], land, JumpModel.isotropic(2.0), AcceptanceRule("metropolis", 1.0), 200000,
                       np.random.default_rng(4))
    x = res.post_burn_in[:, 0]
    # batch means give an honest standard error for the correlated chain
    batches = x[: x.size // 100 * 100].reshape(100, -1)
    var_b = (batches ** 2).mean(axis=1)
    se = var_b.std(ddof=1) / 10
    assert abs((x ** 2).mean() - 1.0) < 4 * se
    assert se < 0.03


def test_well_occupancy_matches_two_state_oracle():
    beta = 3.0
    land = Tilted(1.0, 0.3)
    w = lambda x: math.exp(-beta * float(land.value(np.array([x]))))
    left = integrate.quad(w, -4, 0)[0]
    right = integrate.quad(w, 0, 4)[0]
    res = evolve_chain([1.0], land, JumpModel.isotropic(0.8), AcceptanceRule("sigmoid", beta), 200000,
                       np.random.default_rng(6))
    x = res.post_burn_in[:, 0]
    frac = (x < 0).reshape(100, -1).mean(axis=1)
    se = frac.std(ddof=1) / 10
    assert abs(frac.mean() - left / (left + right)) < 4 * se
    assert frac.mean() > 0.6  # the tilt favours the left well


def test_chain_mean_and_variance_on_double_well():
    beta = 2.0
    land = DoubleWell(0.5, 1.0)
    m, v = canonical_moments_1d(lambda x: float(land.value(np.array([x]))), beta, -5, 5)
    _, states = evolve_chains(np.zeros((4000, 1)), land, JumpModel.isotropic(0.7), AcceptanceRule("sigmoid", beta), 400,
                              np.random.default_rng(8), record_every=400)
    x = states[-1, :, 0]
    assert abs(x.mean() - m) < 4 * np.sqrt(v / x.size)
    assert x.var() == pytest.approx(v, rel=0.06)


def test_constant_shift_gives_identical_decisions():
    a = evolve_chain([0.2], Tilted(1.0, 0.2), JumpModel.isotropic(0.5), AcceptanceRule("sigmoid", 2.0), 5000,
                     np.random.default_rng(9))
    b = evolve_chain([0.2], Tilted(1.0, 0.2, shift=0.75), JumpModel.isotropic(0.5), AcceptanceRule("sigmoid", 2.0), 5000,
                     np.random.default_rng(9))
    assert np.array_equal(a.accepted, b.accepted)
    assert np.array_equal(a.samples, b.samples)


def test_burn_in_validation():
    with pytest.raises(DomainError):
        evolve_chain([0.0], DoubleWell(), JumpModel.isotropic(1.0), AcceptanceRule(), 10, np.random.default_rng(0),
                     burn_in_fraction=1.0)
    res = evolve_chain([0.0], DoubleWell(), JumpModel.isotropic(1.0), AcceptanceRule(), 100, np.random.default_rng(0))
    assert res.post_burn_in.shape == (90, 1)


# -- Lande ---------------------------------------------------------------------------------


def test_lande_rhs_examples(rng):
    land = Quadratic(SpdMatrix([[1.0]]))
    np.testing.assert_array_equal(lande_rhs([0.0], JumpModel([[4.0]]), land, 1.0), [0.0])
    np.testing.assert_allclose(lande_rhs([1.0], JumpModel([[4.0]]), land, 1.0), [-1.0])
    c = random_spd(rng, 3, 20)
    h = random_spd(rng, 3)
    q = rng.standard_normal(3)
    land = Quadratic(SpdMatrix(h))
    np.testing.assert_allclose(lande_rhs(q, JumpModel(c), land, 0.8), -0.2 * c @ (h @ q), rtol=1e-12)
    with pytest.raises(DimensionMismatch):
        lande_rhs([0.0, 0.0], JumpModel([[1.0]]), Quadratic(SpdMatrix([[1.0]])), 1.0)


def test_anisotropic_jumps_tilt_the_mean_velocity():
    land = Quadratic(SpdMatrix.identity(2))
    v = lande_rhs([1.0, 1.0], JumpModel(np.diag([4.0, 1.0])), land, 1.0)
    assert abs(v[0]) == pytest.approx(4 * abs(v[1]))


def test_lande_ode_matches_exponential():
    land = Quadratic(SpdMatrix([[2.0]]))
    t = np.linspace(0, 50, 11)
    q = lande_ode([3.0], JumpModel([[1.5]]), land, 0.2, t)[:, 0]
    np.testing.assert_allclose(q, 3.0 * np.exp(-(0.2 / 4) * 1.5 * 2.0 * t), rtol=1e-7)


def test_lande_vs_chain_small_beta():
    land = Quadratic(SpdMatrix([[1.0]]))
    cmp = lande_vs_chain([3.0], land, JumpModel.isotropic(1.0), AcceptanceRule("sigmoid", 0.05), None, 120, 10000,
                         snapshots=6, seed=3)
    assert cmp.expansion_parameter < 0.3
    np.testing.assert_allclose(cmp.ode_mean[:, 0], 3.0 * np.exp(-0.05 / 4 * cmp.times), rtol=1e-9)
    assert cmp.max_z < 3.5


def test_lande_zero_beta_has_no_mean_motion():
    land = Quadratic(SpdMatrix([[1.0]]))
    cmp = lande_vs_chain([2.0], land, JumpModel.isotropic(1.0), AcceptanceRule("sigmoid", 1.0), 0.0, 50, 4000,
                         snapshots=5, seed=1)
    assert np.all(cmp.ode_mean == 2.0)
    assert cmp.max_z < 4.0


def test_doubling_jump_covariance_doubles_the_drift():
    land = Quadratic(SpdMatrix([[1.0]]))
    drift = []
    for c in (1.0, 2.0):
        cmp = lande_vs_chain([3.0], land, JumpModel([[c]]), AcceptanceRule("sigmoid", 0.04), None, 40, 20000,
                             snapshots=1, seed=4)
        drift.append((3.0 - cmp.chain_mean[-1, 0], cmp.stderr[-1, 0], 3.0 - cmp.ode_mean[-1, 0]))
    rates = [lande_rhs([3.0], JumpModel([[c]]), land, 0.04)[0] for c in (1.0, 2.0)]
    assert rates[1] == 2 * rates[0]
    ratio = drift[1][0] / drift[0][0]
    err = ratio * np.hypot(drift[0][1] / drift[0][0], drift[1][1] / drift[1][0])
    assert abs(ratio - drift[1][2] / drift[0][2]) < 4 * err


def test_expansion_warning():
    land = Quadratic(SpdMatrix([[1.0]]))
    with pytest.warns(ExpansionRegimeViolated):
        lande_vs_chain([5.0], land, JumpModel.isotropic(1.0), AcceptanceRule("sigmoid", 1.0), None, 10, 100,
                       snapshots=2)
