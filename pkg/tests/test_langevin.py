import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from geolearn.errors import DomainError, EmptyEnsemble, NonFiniteState, StabilityWarning
from geolearn.fokker_planck import GridSpec
from geolearn.landscape import DiagonalWhite, Flat, IsotropicWhite, Quadratic, StateDependentDiagonal
from geolearn.langevin import (
    BLOCK_SIZE,
    Ensemble,
    SimConfig,
    empirical_density,
    langevin_step,
    run_ensemble,
)
from geolearn.spd import Interp12, PowerLaw, SpdMatrix

from oracles import em_ou_variance, ou_stationary_variance


def quad1(k=1.0):
    return Quadratic(SpdMatrix([[k]]))


def test_zero_rate_and_zero_noise_is_a_fixed_point():
    cfg = SimConfig(gamma=0.0, dt=0.1, steps=1, metric=PowerLaw(0.0))
    q = np.array([0.3, -1.2])
    out = langevin_step(q, Quadratic(SpdMatrix.identity(2)), IsotropicWhite(0.0, 2), cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(out, q)


def test_ou_stationary_variance():
    gamma, k, dt, n = 0.5, 1.0, 0.05, 10000
    steps = int(round(20 / (gamma * k) / dt))
    cfg = SimConfig(gamma=gamma, dt=dt, steps=steps, ensemble_size=n, seed=3)
    tr = run_ensemble(quad1(k), IsotropicWhite(1.0, 1), cfg, Ensemble.at_point([2.0], n))
    x = tr.final.states[:, 0]
    assert x.var() == pytest.approx(ou_stationary_variance(gamma, k), rel=0.05)
    # the EM chain's own stationary variance is the sharper oracle
    assert x.var() == pytest.approx(em_ou_variance(gamma, k, dt), rel=3 * np.sqrt(2 / n))
    assert abs(x.mean()) < 3 * x.std() / np.sqrt(n)


def test_sqrt_metric_whitens_the_noise():
    gamma, dt, n = 0.3, 0.01, 100000
    cfg = SimConfig(gamma=gamma, dt=dt, steps=1, metric=PowerLaw(0.5))
    q0 = np.zeros((n, 2))
    out = langevin_step(q0, Flat(2), DiagonalWhite([2.0, 3.0]), cfg, np.random.default_rng(4))
    c = np.cov(out, rowvar=False) / (gamma ** 2 * dt)
    np.testing.assert_allclose(c, np.eye(2), atol=0.05)


@pytest.mark.parametrize("spec", [PowerLaw(0.0), PowerLaw(1.0), Interp12(2.0)])
def test_update_covariance_matches_metric_formula(spec):
    from geolearn.spd import metric_from_kappa
    gamma, dt, n = 0.2, 0.04, 100000
    kappa = SpdMatrix([[2.0, 0.5], [0.5, 1.0]])
    from geolearn.landscape import FullCovariance
    cfg = SimConfig(gamma=gamma, dt=dt, steps=1, metric=spec)
    out = langevin_step(np.zeros((n, 2)), Flat(2), FullCovariance(kappa), cfg, np.random.default_rng(5))
    ginv = np.linalg.inv(metric_from_kappa(kappa, spec).entries)
    expected = gamma ** 2 * dt * ginv @ kappa.entries @ ginv
    c = np.cov(out, rowvar=False)
    se = np.sqrt((np.outer(np.diag(expected), np.diag(expected)) + expected ** 2) / n)
    assert np.all(np.abs(c - expected) < 4 * se)


def test_steps_zero_returns_input():
    ens = Ensemble(np.random.default_rng(0).standard_normal((10, 2)))
    cfg = SimConfig(gamma=0.1, dt=0.1, steps=0, ensemble_size=10)
    tr = run_ensemble(Quadratic(SpdMatrix.identity(2)), IsotropicWhite(1.0, 2), cfg, ens)
    np.testing.assert_array_equal(tr.final.states, ens.states)


def test_same_seed_is_bit_identical_and_seed_matters():
    land, noise = Quadratic(SpdMatrix.identity(2)), IsotropicWhite(1.0, 2)
    cfg = SimConfig(gamma=0.2, dt=0.05, steps=20, ensemble_size=50, seed=11, snapshot_every=5)
    a = run_ensemble(land, noise, cfg, Ensemble.at_point([1.0, 1.0], 50))
    b = run_ensemble(land, noise, cfg, Ensemble.at_point([1.0, 1.0], 50))
    for sa, sb in zip(a.snapshots, b.snapshots):
        assert np.array_equal(sa.states, sb.states)
    np.testing.assert_array_equal(a.times(), [0.0, 0.25, 0.5, 0.75, 1.0])
    c = run_ensemble(land, noise, SimConfig(gamma=0.2, dt=0.05, steps=20, ensemble_size=50, seed=12),
                     Ensemble.at_point([1.0, 1.0], 50))
    assert not np.array_equal(a.final.states, c.final.states)


def test_members_do_not_depend_on_ensemble_size():
    # each block owns its stream, so the first block evolves identically in a larger ensemble
    land, noise = quad1(), IsotropicWhite(1.0, 1)
    small = run_ensemble(land, noise, SimConfig(0.3, 0.05, 10, BLOCK_SIZE, seed=2), Ensemble.at_point([0.5], BLOCK_SIZE))
    big = run_ensemble(land, noise, SimConfig(0.3, 0.05, 10, 3 * BLOCK_SIZE, seed=2),
                       Ensemble.at_point([0.5], 3 * BLOCK_SIZE))
    np.testing.assert_array_equal(small.final.states, big.final.states[:BLOCK_SIZE])


def test_nonfinite_state_is_reported():
    land = quad1(1e10)
    cfg = SimConfig(gamma=1.0, dt=1.0, steps=1, metric=PowerLaw(0.0))
    with pytest.raises(NonFiniteState), np.errstate(over="ignore"):
        langevin_step(np.array([[1e300], [1.0]]), land, IsotropicWhite(0.0, 1), cfg, np.random.default_rng(0))


def test_diverged_members_are_frozen_and_others_continue():
    land = quad1(1e300)
    states = np.array([[0.0], [1e10], [0.0]])
    cfg = SimConfig(gamma=1.0, dt=1.0, steps=3, ensemble_size=3, metric=PowerLaw(0.0))
    with pytest.warns(StabilityWarning):
        tr = run_ensemble(land, IsotropicWhite(0.0, 1), cfg, Ensemble(states))
    assert tr.failures and tr.failures[0][0] == 1
    assert np.isnan(tr.final.states[1, 0])
    np.testing.assert_array_equal(tr.final.states[[0, 2], 0], [0.0, 0.0])


def test_config_validation():
    with pytest.raises(DomainError):
        SimConfig(gamma=-1.0, dt=0.1, steps=1)
    with pytest.raises(DomainError):
        SimConfig(gamma=1.0, dt=0.0, steps=1)
    with pytest.raises(EmptyEnsemble):
        Ensemble(np.empty((0, 2)))


@settings(max_examples=30)
@given(st.floats(0.1, 10.0), st.floats(0.01, 1.0), st.floats(-5, 5), st.floats(-5, 5))
def test_noise_free_descent_on_quadratics(k, gamma, x, y):
    land = Quadratic(SpdMatrix.diag([k, 1.0]))
    dt = 1.9 / (gamma * k * 1.0)  # just below the quadratic stability limit with g = I
    cfg = SimConfig(gamma=gamma, dt=min(dt, 1.0), steps=1, metric=PowerLaw(0.0))
    q = np.array([x, y])
    for _ in range(5):
        new = langevin_step(q, land, IsotropicWhite(0.0, 2), cfg, np.random.default_rng(0))
        assert land.value(new) <= land.value(q) + 1e-12
        q = new


def test_drift_correction_reproduces_riemannian_stationary_state():
    # g = kappa depends on q; the stationary flat-space density is exp(-2U/gamma) sqrt(g)
    gamma, n = 0.5, 5000
    noise = StateDependentDiagonal("quadratic", 1, {"base": 1.0, "curvature": 4.0}, box=(-10, 10))
    w = lambda q: np.exp(-q * q / gamma) * np.sqrt(1 + 4 * q * q)
    m2 = quad(lambda q: q * q * w(q), -10, 10)[0] / quad(w, -10, 10)[0]
    results = {}
    for corr in (True, False):
        cfg = SimConfig(gamma, 0.01, 1500, n, seed=1, metric=PowerLaw(1.0), drift_correction=corr)
        x = run_ensemble(quad1(), noise, cfg, Ensemble.at_point([0.0], n)).final.states[:, 0]
        results[corr] = ((x ** 2).mean(), (x ** 2).std() / np.sqrt(n))
    mean, se = results[True]
    assert abs(mean - m2) < 4 * se
    mean, se = results[False]
    assert abs(mean - m2) > 10 * se


# -- empirical_density ---------------------------------------------------------------


def test_histogram_of_a_point_mass():
    grid = GridSpec([0.0], [1.0], [10])
    d = empirical_density(Ensemble.at_point([0.33], 7), grid)
    assert np.count_nonzero(d.values) == 1
    assert d.masses.sum() == pytest.approx(1.0)
    assert d.overflow == 0


def test_histogram_counts_overflow():
    grid = GridSpec([0.0], [1.0], [10])
    d = empirical_density(np.array([[0.5], [2.0], [-1.0], [0.1]]), grid)
    assert d.overflow == 2
    assert d.masses.sum() == pytest.approx(0.5)


def test_uniform_histogram_within_multinomial_noise():
    grid = GridSpec([-1.0, 0.0], [1.0, 2.0], [10, 10])
    n = 200000
    d = empirical_density(Ensemble.uniform(grid, n, seed=3), grid)
    p = 1.0 / 100
    sd = np.sqrt(p * (1 - p) / n)
    assert np.max(np.abs(d.masses - p)) < 5 * sd


def test_histogram_of_empty_ensemble_raises():
    with pytest.raises(EmptyEnsemble):
        empirical_density(np.empty((0, 1)), GridSpec([0.0], [1.0], [8]))
