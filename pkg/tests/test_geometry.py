import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import optimize

from geomext.errors import DegenerateWarning, DomainError, NumericalError
from geomext.geometry import (
    CorrelationFactor,
    GaugeParams,
    c_tau_from_quantile,
    calibrate_c_tau,
    correlation_factor,
    gauge,
    initial_c_tau,
    l1_simplex_check,
    powexp_correlation,
    radial_angular,
    radial_angular_batch,
    radial_threshold,
)
from geomext.ingest import grid_coordinates


def gauge_oracle(w, S, gamma):
    x = np.power(np.asarray(w, dtype=float), 1.0 / gamma)
    return float(x @ np.linalg.inv(S) @ x) ** (gamma / 2)


def test_radial_angular_examples():
    p = radial_angular([1, 1])
    assert p.r == 2 and p.w.tolist() == [0.5, 0.5]
    p = radial_angular([3, 0, 0, 0], t=5)
    assert p.r == 3 and p.w.tolist() == [1, 0, 0, 0] and p.t == 5
    with pytest.raises(DomainError):
        radial_angular([0, 0])
    with pytest.raises(DomainError):
        radial_angular([1, -1])
    with pytest.raises(DomainError):
        radial_angular_batch(np.zeros((2, 3)))


positive_vectors = arrays(np.float64, st.integers(1, 12), elements=st.floats(0, 1e6, allow_nan=False)).filter(
    lambda z: z.sum() > 0)


@given(positive_vectors)
def test_radial_angular_reconstruction(z):
    p = radial_angular(z)
    assert np.all(p.w >= 0)
    assert abs(p.w.sum() - 1) <= 1e-12
    assert np.allclose(p.r * p.w, z, rtol=1e-12, atol=1e-10 * max(1.0, z.max()))


def test_powexp_examples():
    S = powexp_correlation([(0, 0), (1, 0), (3, 0)], 0.830, 1.89)
    assert np.all(np.diag(S) == 1)
    assert S[0, 1] == pytest.approx(math.exp(-(1 / 0.830) ** 1.89), rel=1e-14)
    assert S[0, 1] == pytest.approx(0.241, abs=5e-4)
    assert S[0, 1] > S[1, 2] > S[0, 2]
    with pytest.raises(DomainError):
        powexp_correlation([(0, 0), (1, 0)], 0.0, 1.0)
    with pytest.raises(DomainError):
        powexp_correlation([(0, 0), (1, 0)], 1.0, 2.5)


def test_gauge_identity_cases(rng):
    W = rng.dirichlet(np.ones(5), size=1000)
    assert np.allclose(gauge(W, np.eye(5), 2.0), 1.0, atol=1e-14)
    assert gauge(np.array([0.5, 0.5]), np.eye(2), 1.0) == pytest.approx(math.sqrt(0.5), rel=1e-14)


def test_gauge_matches_inverse_oracle(rng):
    coords = grid_coordinates(3)
    for phi, kappa, gamma in [(1.0, 1.5, 2.0), (0.83, 1.89, 1.16), (2.0, 0.7, 0.4), (1.3, 1.0, 5.0)]:
        S = powexp_correlation(coords, phi, kappa)
        W = rng.dirichlet(np.ones(9), size=20)
        g = gauge(W, correlation_factor(coords, phi, kappa), gamma)
        for w, gv in zip(W, g):
            assert gv == pytest.approx(gauge_oracle(w, S, gamma), rel=1e-9)


@given(arrays(np.float64, 4, elements=st.floats(1e-6, 50)), st.floats(1e-3, 1e3),
       st.floats(0.2, 8.0), st.floats(0.3, 3.0), st.floats(0.1, 2.0))
def test_gauge_homogeneity(z, c, gamma, phi, kappa):
    fac = correlation_factor(grid_coordinates(2), phi, kappa)
    g1 = gauge(c * z, fac, gamma)
    g0 = gauge(z, fac, gamma)
    assert abs(g1 - c * g0) <= 1e-10 * max(1.0, abs(c * g0))


@given(st.permutations(list(range(9))), st.floats(0.2, 5.0))
def test_gauge_permutation_equivariance(perm, gamma):
    coords = grid_coordinates(3)
    S = powexp_correlation(coords, 1.2, 1.3)
    w = np.linspace(0.02, 0.2, 9)
    w = w / w.sum()
    p = np.array(perm)
    g0 = gauge(w, S, gamma)
    g1 = gauge(w[p], S[np.ix_(p, p)], gamma)
    assert abs(g0 - g1) <= 1e-12 * max(1.0, g0)


def test_gauge_rejects_bad_input():
    with pytest.raises(DomainError):
        gauge(np.array([0.5, 0.5]), np.eye(2), 0.0)
    with pytest.raises(DomainError):
        gauge(np.array([1.5, -0.5]), np.eye(2), 1.0)


def test_factor_cache_and_jitter():
    coords = grid_coordinates(3)
    a = correlation_factor(coords, 1.0, 1.5)
    assert correlation_factor(coords.copy(), 1.0, 1.5) is a
    # duplicated site: exactly singular, rescued by diagonal jitter
    f = CorrelationFactor.from_matrix(powexp_correlation([(0, 0), (0, 0), (1, 0)], 1.0, 1.0))
    assert f.jitter in (1e-10, 1e-8)
    with pytest.raises(NumericalError):
        CorrelationFactor.from_matrix(np.ones((3, 3)) * 2 - np.eye(3))
    with pytest.raises(DomainError):
        CorrelationFactor.from_matrix([[1, 0.5], [0.4, 1]])


def test_quad_form_matches_inverse(rng):
    S = powexp_correlation(grid_coordinates(3), 1.0, 1.0)
    f = CorrelationFactor.from_matrix(S)
    X = rng.normal(size=(5, 9))
    assert np.allclose(f.quad_form(X), np.einsum("ij,jk,ik->i", X, np.linalg.inv(S), X), rtol=1e-10)


def test_c_tau_from_quantile():
    assert c_tau_from_quantile(1.0, 0.8) == pytest.approx(-math.log(0.2), rel=1e-12)
    # bisection on the incomplete-gamma integral for shape 2
    root = optimize.brentq(lambda c: 1 - math.exp(-c) * (1 + c) - 0.8, 0.1, 20, xtol=1e-14)
    assert c_tau_from_quantile(2.0, 0.8) == pytest.approx(root, rel=1e-10)
    assert root == pytest.approx(2.994, abs=1e-3)
    taus = np.linspace(0.05, 0.95, 19)
    assert np.all(np.diff([c_tau_from_quantile(3.0, t) for t in taus]) > 0)
    assert initial_c_tau(9, 0.8) == c_tau_from_quantile(9.0, 0.8)
    with pytest.raises(DomainError):
        c_tau_from_quantile(1.0, 1.0)


@given(st.integers(5, 3000), st.floats(0.05, 0.95), st.integers(0, 2**31))
def test_calibration_fraction(n, tau, seed):
    g = np.random.default_rng(seed)
    r = g.gamma(3.0, size=n)
    gv = g.uniform(0.5, 2, size=n)
    c = calibrate_c_tau(r, gv, tau)
    frac = np.mean(r > c / gv)
    assert abs(frac - (1 - tau)) <= 1.0 / n + 1e-12
    assert calibrate_c_tau(2 * r, gv, tau) == pytest.approx(2 * c, rel=1e-14)


def test_calibration_degenerate():
    with pytest.warns(DegenerateWarning):
        c = calibrate_c_tau(np.full(10, 2.0), np.ones(10), 0.8)
    assert c == 2.0


def test_gauge_params_validation_and_round_trip():
    coords = grid_coordinates(2)
    p = GaugeParams(0.5, 1.0, 1.5, 1.2, 3.0, 0.8, coords)
    assert p.d == 4 and p.shape == 2.0
    assert p.threshold_phi == 1.0 and p.threshold_kappa == 1.5
    back = GaugeParams.from_dict(p.to_dict())
    assert back.to_dict() == p.to_dict()
    for bad in [dict(lam=0), dict(phi=-1), dict(kappa=2.1), dict(gamma=0), dict(c_tau=0), dict(tau=1)]:
        with pytest.raises(DomainError):
            p.with_(**bad)


def test_radial_threshold_examples(rng):
    coords = grid_coordinates(2)
    p = GaugeParams(1.0, 1e-3, 1.0, 2.0, 5.0, 0.8, coords)
    W = rng.dirichlet(np.ones(4), size=50)
    # identity-like correlation and gamma = 2: g = 1, threshold constant
    assert np.allclose(radial_threshold(W, p), 5.0, rtol=1e-12)
    q = GaugeParams(1.0, 1.0, 1.5, 0.7, 5.0, 0.8, coords, threshold_phi=1.0, threshold_kappa=1.5)
    w = W[0]
    g = float(q.threshold_gauge(w)[0])
    assert radial_threshold(w, q) == pytest.approx(5.0 / g)
    # only the gamma = 2 threshold gauge matters, not the model gamma
    assert radial_threshold(w, q.with_(gamma=3.0)) == radial_threshold(w, q)
    # doubling the gauge halves the threshold (homogeneity: g(2w) = 2 g(w))
    assert 5.0 / float(q.threshold_gauge(2 * w)[0]) == pytest.approx(radial_threshold(w, q) / 2)


def test_threshold_exceedance_fraction(rng):
    coords = grid_coordinates(2)
    Z = rng.exponential(size=(5000, 4))
    r, W = radial_angular_batch(Z)
    p = GaugeParams(1.0, 1.0, 1.5, 2.0, 1.0, 0.8, coords)
    c = calibrate_c_tau(r, p.threshold_gauge(W), 0.8)
    p = p.with_(c_tau=c)
    assert abs(np.mean(r > radial_threshold(W, p)) - 0.2) <= 1 / 5000


def test_simplex_check():
    assert l1_simplex_check([[0.2, 0.8], [1, 0]])
    assert not l1_simplex_check([[0.2, 0.7]])
