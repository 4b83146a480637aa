import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from geomext.deform import (
    Deformation,
    apply_deformation,
    binned_residual_sd,
    br_chi,
    chi_objective,
    default_anchors,
    empirical_chi_matrix,
    fit_deformation,
    identity_deformation,
    interpolating_spline,
    tps_kernel,
)
from geomext.errors import DomainError
from geomext.ingest import grid_coordinates, pairwise_distances


def br_oracle(h, rho, alpha):
    return 2 - 2 * stats.norm.cdf(math.sqrt((h / rho) ** alpha) / 2)


def test_empirical_chi_independent():
    rng = np.random.default_rng(7)
    n, u = 1_000_000, 0.99
    X = rng.standard_exponential((n, 2))
    chi = empirical_chi_matrix(X, u)
    m = round(n * (1 - u))
    # joint count is ~ Binomial(n, (1-u)^2); chi = count / m
    se = math.sqrt(n * (1 - u) ** 2 * (1 - (1 - u) ** 2)) / m
    assert abs(chi.estimates[0, 1] - 0.01) < 3 * se
    assert np.all(np.diag(chi.estimates) == 1)


def test_empirical_chi_structure(rng):
    X = rng.standard_exponential((5000, 4))
    X[:, 3] = X[:, 0]
    chi = empirical_chi_matrix(X, 0.95)
    E = chi.estimates
    assert E[0, 3] == 1.0
    assert np.array_equal(E, E.T)
    assert np.all((E >= 0) & (E <= 1))
    assert chi.d == 4
    with pytest.raises(DomainError):
        empirical_chi_matrix(X[:100], 0.95)
    with pytest.raises(DomainError):
        empirical_chi_matrix(X, 1.0)


def test_br_chi_examples():
    assert br_chi(0.0, 1.0, 1.0) == 1.0
    assert br_chi(1e6, 1.0, 1.0) < 1e-10
    h = np.linspace(0, 20, 400)
    v = br_chi(h, 1.3, 1.4)
    assert np.all(np.diff(v) < 0)
    for hh, rho, alpha in [(0.5, 1.0, 1.0), (2.0, 0.7, 2.0), (3.0, 4.0, 0.3)]:
        assert br_chi(hh, rho, alpha) == pytest.approx(br_oracle(hh, rho, alpha), rel=1e-12)
    for bad in [(1.0, 0.0, 1.0), (1.0, 1.0, 0.0), (1.0, 1.0, 2.5), (-1.0, 1.0, 1.0)]:
        with pytest.raises(DomainError):
            br_chi(*bad)


def test_tps_kernel_values():
    assert tps_kernel(0.0) == 0.0
    assert tps_kernel(1.0) == 0.0
    assert tps_kernel(2.0) == pytest.approx(4 * math.log(2))


def test_apply_identity_and_rotation(rng):
    coords = grid_coordinates(5)
    anchors = coords[default_anchors(coords)]
    assert np.array_equal(apply_deformation(identity_deformation(anchors), coords), coords)
    t = 0.7
    rot = np.array([[0.3, math.cos(t), -math.sin(t)], [-1.1, math.sin(t), math.cos(t)]])
    D = apply_deformation(Deformation(anchors, rot, np.zeros_like(anchors), 1, 1), coords)
    assert np.allclose(pairwise_distances(D), pairwise_distances(coords), atol=1e-12)


def test_unit_distance_gets_no_spline_displacement():
    anchors = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
    w = np.zeros((3, 2))
    w[0] = [2.0, -1.0]
    dfm = Deformation(anchors, np.array([[0, 1, 0], [0, 0, 1.0]]), w, 1, 1)
    p = np.array([[0.6, 0.8]])  # unit distance from the active anchor
    assert np.allclose(dfm(p), p, atol=1e-15)


def test_interpolating_spline_side_conditions(rng):
    a = grid_coordinates(3)
    images = a + rng.normal(scale=0.1, size=a.shape)
    W, aff = interpolating_spline(a, images)
    P = np.column_stack([np.ones(len(a)), a])
    assert np.allclose(P.T @ W, 0, atol=1e-10)
    dfm = Deformation(a, aff, W, 1, 1)
    assert np.allclose(dfm(a), images, atol=1e-10)


def test_default_anchors():
    coords = grid_coordinates(5)
    idx = default_anchors(coords)
    assert len(idx) == 6
    assert len(set(idx.tolist())) == 6
    assert np.linalg.matrix_rank(coords[idx][1:] - coords[idx][0]) == 2
    assert len(default_anchors(grid_coordinates(3))) == 3


def test_too_few_or_collinear_anchors():
    coords = grid_coordinates(3)
    chi = br_chi(pairwise_distances(coords), 1.0, 1.0)
    with pytest.raises(DomainError):
        fit_deformation(coords, chi, anchors=np.array([0, 1]))
    with pytest.raises(DomainError):
        fit_deformation(coords, chi, anchors=np.array([0, 1, 2]))  # one row
    with pytest.raises(DomainError):
        fit_deformation(coords, chi, anchors=[[10.0, 10.0], [1, 1], [2, 2]])


def test_self_consistent_fit():
    coords = grid_coordinates(4)
    chi = br_chi(pairwise_distances(coords), 1.5, 1.2)
    dfm = fit_deformation(coords, chi, n_starts=2)
    D = dfm(coords)
    iu = np.triu_indices(len(coords), 1)
    resid = br_chi(pairwise_distances(D)[iu], dfm.br_rho, dfm.br_alpha) - chi[iu]
    assert math.sqrt(np.mean(resid ** 2)) < 0.01
    assert dfm.objective <= dfm.meta["identity_objective"] + 1e-15
    # perturbed starts cannot beat the identity map at the true parameters
    ident = chi_objective(coords, chi, 1.5, 1.2)
    assert ident < 1e-20
    assert ident <= chi_objective(coords + 0.05, chi, 1.5, 1.2) + 1e-20


def test_fit_improves_anisotropic_dependence():
    coords = grid_coordinates(4)
    stretched = coords * np.array([2.0, 0.6])
    chi = br_chi(pairwise_distances(stretched), 1.5, 1.0)
    dfm = fit_deformation(coords, chi, n_starts=2)
    assert dfm.objective < dfm.meta["identity_objective"]
    P = np.column_stack([np.ones(len(dfm.anchors)), dfm.anchors])
    assert np.allclose(P.T @ dfm.spline_weights, 0, atol=1e-8)
    iu = np.triu_indices(len(coords), 1)
    hg = pairwise_distances(coords)[iu]
    hd = pairwise_distances(dfm(coords))[iu]
    rg = chi[iu] - br_chi(hg, *_best_identity(hg, chi[iu]))
    rd = chi[iu] - br_chi(hd, dfm.br_rho, dfm.br_alpha)
    assert binned_residual_sd(hd, rd) <= binned_residual_sd(hg, rg)


def _best_identity(h, chi):
    from scipy import optimize
    f = lambda t: np.sum((br_chi(h, math.exp(t[0]), 2 / (1 + math.exp(-t[1]))) - chi) ** 2)  # noqa: E731
    t = optimize.minimize(f, [0.0, 0.0], method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14}).x
    return math.exp(t[0]), 2 / (1 + math.exp(-t[1]))


def test_round_trip():
    coords = grid_coordinates(3)
    dfm = Deformation(coords[:3], np.array([[0, 1, 0], [0, 0, 1.0]]), np.ones((3, 2)), 1.2, 0.9, 0.5, {"a": 1})
    back = Deformation.from_dict(dfm.to_dict())
    assert np.array_equal(back(coords), dfm(coords))
    assert back.br_rho == 1.2 and back.meta == {"a": 1}


@given(st.floats(0.1, 5), st.floats(0.05, 2.0), st.floats(0, 10), st.floats(0, 10))
def test_br_chi_monotone_property(rho, alpha, h1, h2):
    lo, hi = sorted([h1, h2])
    assert br_chi(lo, rho, alpha) >= br_chi(hi, rho, alpha)
    assert 0 <= br_chi(hi, rho, alpha) <= 1
