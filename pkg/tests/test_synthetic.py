import math

import numpy as np
import pytest
from scipy import special, stats

from geomext.deform import empirical_chi_matrix
from geomext.errors import DomainError, SamplingError
from geomext.geometry import correlation_factor, gauge
from geomext.ingest import grid_coordinates
from geomext.synthetic import SyntheticSpec, correlation, exponential_from_normal, generate, generate_matrix, site_coordinates


def test_spec_validation():
    for kw in [dict(d=0), dict(n=0), dict(phi=0.0), dict(kappa=2.5), dict(gamma=0.0), dict(r_window=(2.0, 1.0))]:
        base = dict(kind="MetaGaussian", d=4, n=10)
        base.update(kw)
        with pytest.raises(DomainError):
            SyntheticSpec(**base)
    with pytest.raises(ValueError):
        SyntheticSpec("Nope", 4, 10)


def test_site_coordinates():
    assert np.array_equal(site_coordinates(9), grid_coordinates(3))
    c = site_coordinates(3)
    assert c.shape == (3, 2) and np.all(c[:, 0] == 1)


def test_exponential_from_normal_tails():
    x = np.array([-8.0, 0.0, 40.0])
    e = exponential_from_normal(x)
    assert e[1] == pytest.approx(math.log(2))
    # -log(1 - Phi(x)) ~ Phi(x) in the lower tail, -log Phi(-x) in the upper
    assert e[0] == pytest.approx(special.ndtr(-8.0), rel=1e-6)
    assert e[2] == pytest.approx(-special.log_ndtr(-40.0), rel=1e-12) and e[2] > 800


def test_independent_chi():
    Z = generate_matrix(SyntheticSpec("IndependentExp", 2, 1_000_000, seed=1))
    chi = empirical_chi_matrix(Z, 0.99).estimates[0, 1]
    se = math.sqrt(1e6 * 1e-4 * (1 - 1e-4)) / 1e4
    assert abs(chi - 0.01) < 3 * se


def test_comonotone_chi():
    Z = generate_matrix(SyntheticSpec("Comonotone", 3, 10_000, seed=2))
    for u in (0.5, 0.9, 0.99):
        assert np.all(empirical_chi_matrix(Z, u).estimates == 1.0)


def test_meta_gaussian_margins_and_correlation():
    spec = SyntheticSpec("MetaGaussian", 4, 200_000, 1.0, 1.5, seed=3)
    Z = generate_matrix(spec)
    assert np.all(np.abs(Z.mean(axis=0) - 1) < 3 / math.sqrt(spec.n))
    # normal scores recover the prescribed correlation
    X = -special.ndtri(np.exp(-Z))
    R = np.corrcoef(X, rowvar=False)
    assert np.allclose(R, correlation(spec), atol=0.01)


def test_reproducible_and_dataset():
    spec = SyntheticSpec("MetaGaussian", 9, 500, seed=4, run_id=2)
    a, b = generate(spec), generate(spec)
    assert np.array_equal(a.values, b.values)
    assert a.run_id == 2 and np.array_equal(a.sites, spec.coords())
    assert not np.array_equal(a.values, generate(SyntheticSpec("MetaGaussian", 9, 500, seed=5)).values)


def test_known_gauge_conditional_radius():
    spec = SyntheticSpec("KnownGaugeRejection", 4, 20_000, 1.2, 1.5, seed=6, gamma=1.4, lam=0.8,
                         r_window=(0.5, 6.0))
    Z = generate_matrix(spec)
    r = Z.sum(axis=1)
    W = Z / r[:, None]
    assert np.all((r >= 0.5 * (1 - 1e-12)) & (r <= 6.0 * (1 + 1e-12)))
    g = gauge(W, correlation_factor(spec.coords(), spec.phi, spec.kappa), spec.gamma)
    a = spec.lam * spec.d
    # given w, r is Gamma(a, rate g) truncated to the window: the PIT is uniform
    lo, hi = special.gammainc(a, 0.5 * g), special.gammainc(a, 6.0 * g)
    u = (special.gammainc(a, r * g) - lo) / (hi - lo)
    assert stats.kstest(u, "uniform").pvalue > 1e-3


def test_known_gauge_angular_law():
    """Angular density is proportional to g^-a P(window) against Lebesgue measure on the simplex."""
    spec = SyntheticSpec("KnownGaugeRejection", 2, 40_000, 1.0, 1.0, seed=7, gamma=2.0, lam=1.0,
                         r_window=(0.0, 8.0))
    Z = generate_matrix(spec)
    w1 = Z[:, 0] / Z.sum(axis=1)
    fac = correlation_factor(spec.coords(), spec.phi, spec.kappa)
    grid = np.linspace(1e-6, 1 - 1e-6, 4001)
    Wg = np.column_stack([grid, 1 - grid])
    g = gauge(Wg, fac, 2.0)
    dens = g ** -2.0 * special.gammainc(2.0, 8.0 * g)
    cdf = np.concatenate([[0], np.cumsum((dens[1:] + dens[:-1]) / 2 * np.diff(grid))])
    cdf /= cdf[-1]
    assert stats.kstest(w1, lambda x: np.interp(x, grid, cdf)).pvalue > 1e-3


def test_known_gauge_rejection_failure():
    spec = SyntheticSpec("KnownGaugeRejection", 9, 100, 1.0, 1.5, seed=0, lam=3.0, r_window=(0.0, 1e-3))
    with pytest.raises(SamplingError):
        generate_matrix(spec)
