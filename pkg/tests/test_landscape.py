import numpy as np
import pytest
from hypothesis import given, strategies as st

from geolearn.errors import DimensionMismatch, DomainError, NonFiniteState
from geolearn.landscape import (
    DiagonalWhite,
    DoubleWell,
    Flat,
    FullCovariance,
    IsotropicWhite,
    Quadratic,
    Rosenbrock,
    StateDependentDiagonal,
    as_state,
    fd_check,
    gradient,
    kappa_at,
    landscape_from_dict,
    noise_from_dict,
    potential,
    sample_noise_gradient,
)
from geolearn.spd import SpdMatrix

from oracles import central_difference, random_spd


def test_potential_examples():
    assert potential(Quadratic(SpdMatrix.identity(2)), [0.0, 0.0]) == 0.0
    assert potential(Quadratic(SpdMatrix([[2.0]])), [1.0]) == 1.0
    assert potential(Rosenbrock(1, 100), [1.0, 1.0]) == 0.0
    assert potential(DoubleWell(2.0, 1.5), [1.5]) == 0.0
    assert potential(DoubleWell(2.0, 1.5), [0.0]) == 2.0


def test_gradient_examples(rng):
    c = rng.standard_normal(3)
    quad = Quadratic(SpdMatrix(random_spd(rng, 3)), c)
    np.testing.assert_array_equal(gradient(quad, c), np.zeros(3))
    for s in (1.0, 2.5):
        assert abs(gradient(DoubleWell(1.0, s), [s])[0]) < 1e-12
        assert abs(gradient(DoubleWell(1.0, s), [-s])[0]) < 1e-12
    rb = Rosenbrock(1, 100)
    q = rng.uniform(-1.5, 1.5, 2)
    g_ref = central_difference(lambda x: potential(rb, x), q)
    np.testing.assert_allclose(gradient(rb, q), g_ref, rtol=1e-5)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        potential(Rosenbrock(), [1.0])
    with pytest.raises(DimensionMismatch):
        gradient(Quadratic(SpdMatrix.identity(2)), [1.0, 2.0, 3.0])
    with pytest.raises(DimensionMismatch):
        Quadratic(SpdMatrix.identity(2), [0.0])


def test_as_state_rejects_nonfinite():
    with pytest.raises(NonFiniteState):
        as_state([1.0, np.inf])
    with pytest.raises(DimensionMismatch):
        as_state([1.0], dim=2)


def test_fd_check_examples(rng):
    quad = Quadratic(SpdMatrix(random_spd(rng, 3)))
    assert fd_check(quad, rng.standard_normal(3)) < 1e-8
    assert fd_check(Rosenbrock(1, 100), [0.3, 0.7]) < 1e-5
    assert fd_check(DoubleWell(), [0.0]) < 1e-6
    with pytest.raises(DomainError):
        fd_check(quad, np.zeros(3), h=0.0)


@pytest.mark.parametrize("land", [
    Quadratic(SpdMatrix([[2.0, 0.3], [0.3, 1.0]]), np.array([0.5, -1.0])),
    DoubleWell(1.5, 2.0),
    Rosenbrock(1.0, 100.0),
    Flat(2, 3.0),
])
def test_fd_check_random_points(land):
    rng = np.random.default_rng(7)
    for _ in range(100):
        q = rng.uniform(-2, 2, land.dim)
        assert fd_check(land, q) < 1e-5


def test_batched_evaluation_matches_pointwise(rng):
    land = Rosenbrock(1.0, 10.0)
    q = rng.standard_normal((4, 3, 2))
    vals = potential(land, q)
    grads = gradient(land, q)
    for idx in np.ndindex(4, 3):
        assert vals[idx] == potential(land, q[idx])
        np.testing.assert_array_equal(grads[idx], gradient(land, q[idx]))


def test_kappa_at_examples(rng):
    np.testing.assert_array_equal(kappa_at(IsotropicWhite(1.0, 3), np.zeros(3)).entries, np.eye(3))
    np.testing.assert_array_equal(kappa_at(DiagonalWhite([2.0, 3.0]), np.zeros(2)).entries, np.diag([4.0, 9.0]))
    k = random_spd(rng, 3)
    k = 0.5 * (k + k.T)
    np.testing.assert_array_equal(kappa_at(FullCovariance(SpdMatrix(k)), np.ones(3)).entries, SpdMatrix(k).entries)


def test_state_dependent_box():
    noise = StateDependentDiagonal("quadratic", 2, {"base": 1.0, "curvature": [0.5, 2.0]}, box=(-3, 3))
    np.testing.assert_allclose(kappa_at(noise, [1.0, 2.0]).entries, np.diag([1.5, 9.0]))
    with pytest.raises(DomainError):
        kappa_at(noise, [4.0, 0.0])
    with pytest.raises(DomainError):
        StateDependentDiagonal("linear", 1, {"base": 0.5, "slope": 1.0}, box=(-10, 10))
    with pytest.raises(DomainError):
        StateDependentDiagonal("spiral", 1)


@given(st.sampled_from(["quadratic", "gaussian_bump", "tanh_step", "linear"]),
       st.floats(-9.9, 9.9), st.floats(-9.9, 9.9))
def test_state_dependent_kappa_is_spd(name, x, y):
    params = {"linear": {"base": 2.0, "slope": 0.1}}.get(name, {})
    noise = StateDependentDiagonal(name, 2, params)
    k = kappa_at(noise, [x, y]).entries
    assert np.all(np.linalg.eigvalsh(k) > 0)


def test_noise_samples_statistics():
    rng = np.random.default_rng(1)
    z = sample_noise_gradient(IsotropicWhite(0.0, 2), np.zeros((10, 2)), rng)
    assert not np.any(z)
    x = sample_noise_gradient(IsotropicWhite(1.0, 2), np.zeros((100000, 2)), rng)
    assert np.all(np.abs(x.mean(axis=0)) < 3 / np.sqrt(1e5))
    y = sample_noise_gradient(FullCovariance(SpdMatrix.diag([4.0, 9.0])), np.zeros((100000, 2)), rng)
    np.testing.assert_allclose(y.var(axis=0), [4.0, 9.0], rtol=0.05)


def test_full_covariance_samples_match_within_standard_errors():
    rng = np.random.default_rng(2)
    k = np.array([[2.0, 0.6], [0.6, 1.0]])
    n = 200000
    x = sample_noise_gradient(FullCovariance(SpdMatrix(k)), np.zeros((n, 2)), rng)
    c = np.cov(x, rowvar=False)
    # standard error of a sample covariance entry: sqrt((k_ii k_jj + k_ij^2) / n)
    se = np.sqrt((np.outer(np.diag(k), np.diag(k)) + k ** 2) / n)
    assert np.all(np.abs(c - k) < 3 * se)


def test_state_dependent_samples_follow_local_variance():
    rng = np.random.default_rng(3)
    noise = StateDependentDiagonal("quadratic", 1, {"base": 1.0, "curvature": 1.0})
    q = np.full((100000, 1), 2.0)
    x = sample_noise_gradient(noise, q, rng)
    assert x.var() == pytest.approx(5.0, rel=0.03)


def test_sampling_is_reproducible():
    noise = FullCovariance(SpdMatrix([[1.0, 0.2], [0.2, 0.5]]))
    a = sample_noise_gradient(noise, np.zeros((50, 2)), np.random.default_rng(9))
    b = sample_noise_gradient(noise, np.zeros((50, 2)), np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_config_round_trip():
    lands = [Quadratic(SpdMatrix([[2.0, 0.1], [0.1, 1.0]]), np.array([1.0, 2.0])), DoubleWell(2.0, 0.5),
             Rosenbrock(1.0, 50.0), Flat(3, 1.0)]
    for land in lands:
        again = landscape_from_dict(land.to_dict())
        q = np.linspace(-1, 1, land.dim)
        assert potential(again, q) == potential(land, q)
    noises = [IsotropicWhite(0.5, 2), DiagonalWhite([1.0, 2.0]), FullCovariance(SpdMatrix([[1.0, 0.1], [0.1, 2.0]])),
              StateDependentDiagonal("gaussian_bump", 2, {"amplitude": [1.0, 2.0]}, box=(-5, 5))]
    for n in noises:
        again = noise_from_dict(n.to_dict())
        np.testing.assert_array_equal(again.kappa_field(np.ones(n.dim)), n.kappa_field(np.ones(n.dim)))
    with pytest.raises(DomainError):
        landscape_from_dict({"kind": "saddle"})
    with pytest.raises(DomainError):
        landscape_from_dict({"kind": "quadratic", "hessian": [[1.0]], "centre": [0.0]})
