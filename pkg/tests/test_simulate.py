import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from geomext.errors import DomainError, SamplingError
from geomext.estimate import ExtremeSet
from geomext.fit import ExceedanceSet, exceedances
from geomext.geometry import GaugeParams, calibrate_c_tau, radial_angular_batch
from geomext.ingest import grid_coordinates
from geomext.simulate import (
    estimate_p_rprime_gt_k,
    importance_weight,
    sample_angle_indices,
    sample_angles,
    sample_blocks,
    sample_radius,
    select_k,
    simulate_blocks,
    simulate_cloud,
)


def constant_gauge(d, lam=1.0, c=1.0):
    """Sigma ~ identity (tiny range) and gamma = 2: g = 1 and r_tau = c everywhere."""
    coords = grid_coordinates(int(math.isqrt(d))) if math.isqrt(d) ** 2 == d else np.column_stack(
        [np.zeros(d), np.arange(d)]).astype(float)
    return GaugeParams(lam, 1e-3, 1.0, 2.0, c, 0.8, coords)


def exc_from(Z, params):
    return exceedances(Z, params)


@pytest.fixture(scope="module")
def gaussian_case():
    rng = np.random.default_rng(3)
    coords = grid_coordinates(2)
    Z = rng.exponential(size=(4000, 4))
    p = GaugeParams(0.8, 1.0, 1.5, 1.4, 1.0, 0.8, coords)
    r, W = radial_angular_batch(Z)
    p = p.with_(c_tau=calibrate_c_tau(r, p.threshold_gauge(W), 0.8))
    exc, mask = exceedances(Z, p)
    return Z, p, exc, mask


def test_importance_weight_examples(gaussian_case):
    Z, p, exc, mask = gaussian_case
    assert np.all(importance_weight(exc.w, 1.0, p) == 1.0)
    q = constant_gauge(1, lam=1.0, c=1.3)
    for k in (1.0, 1.5, 3.0):
        assert importance_weight(np.array([1.0]), k, q) == pytest.approx(math.exp(-1.3 * (k - 1)), rel=1e-13)
    ks = np.linspace(1, 4, 31)
    vals = np.array([importance_weight(exc.w[:20], k, p) for k in ks])
    assert np.all(np.diff(vals, axis=0) <= 0)
    with pytest.raises(DomainError):
        importance_weight(exc.w[0], 0.5, p)


def test_p_rprime_constant_gauge_closed_form():
    d = 4
    q = constant_gauge(d, lam=0.7, c=2.2)
    rng = np.random.default_rng(0)
    W = rng.dirichlet(np.ones(d), size=200)
    n = len(W)
    exc = ExceedanceSet(np.full(n, 3.0), W, q.radial_threshold(W), np.arange(n), 5 * n)
    assert np.allclose(q.gauge(W), 1.0, atol=1e-14)
    a = 0.7 * d
    for k in (1.0, 1.3, 2.0, 3.7):
        expected = special.gammaincc(a, k * 2.2) / special.gammaincc(a, 2.2)
        assert abs(estimate_p_rprime_gt_k(exc, k, q) - expected) < 1e-12
    assert estimate_p_rprime_gt_k(exc, 1.0, q) == 1.0


def test_p_rprime_monotone(gaussian_case):
    Z, p, exc, mask = gaussian_case
    vals = [estimate_p_rprime_gt_k(exc, k, p) for k in np.linspace(1, 3, 21)]
    assert vals[0] == 1.0
    assert np.all(np.diff(vals) <= 0)


def test_sample_angles_uniform_at_k1_and_simplex(gaussian_case):
    Z, p, exc, mask = gaussian_case
    idx = sample_angle_indices(exc, 1.0, 200_000, 5, p)
    counts = np.bincount(idx, minlength=exc.n)
    expected = 200_000 / exc.n
    assert stats.chisquare(counts).pvalue > 1e-4
    assert abs(counts.mean() - expected) < 1e-9
    A = sample_angles(exc, 1.7, 1000, 5, p)
    assert np.allclose(A.sum(axis=1), 1.0)


def test_sample_angles_ratio():
    # two angles whose weights are 9:1 under the exponential-radius model
    q = constant_gauge(2, lam=0.5, c=1.0)
    k = 2.0
    thr = np.array([1.0, 1.0 + math.log(9) / (k - 1)])
    W = np.array([[0.5, 0.5], [0.3, 0.7]])
    exc = ExceedanceSet(thr + 1, W, thr, np.arange(2), 10)
    iw = importance_weight(W, k, q, thr)
    assert iw[0] / iw[1] == pytest.approx(9.0, rel=1e-12)
    m = 100_000
    idx = sample_angle_indices(exc, k, m, 11, q)
    n0 = np.count_nonzero(idx == 0)
    se = math.sqrt(m * 0.9 * 0.1)
    assert abs(n0 - 0.9 * m) < 3 * se


def test_weighted_indicator_average(gaussian_case):
    Z, p, exc, mask = gaussian_case
    k = 2.5
    iw = importance_weight(exc.w, k, p, exc.thresholds)
    ind = exc.w[:, 0] > 0.3
    target = np.sum(ind * iw) / np.sum(iw)
    m = 100_000
    A = sample_angles(exc, k, m, 9, p)
    est = np.mean(A[:, 0] > 0.3)
    assert abs(est - target) < 3 * math.sqrt(target * (1 - target) / m)


def test_sample_radius_memoryless():
    q = constant_gauge(1, lam=1.0, c=1.0)
    r = sample_radius(np.array([1.0]), 1.0, q, 4, size=100_000)
    assert np.all(r > 1.0)
    assert abs(r.mean() - 2.0) < 3 / math.sqrt(len(r))


@pytest.mark.parametrize("w,k", [((0.25, 0.25, 0.25, 0.25), 1.0), ((0.7, 0.1, 0.1, 0.1), 1.5),
                                 ((0.05, 0.05, 0.45, 0.45), 2.0), ((0.97, 0.01, 0.01, 0.01), 3.0),
                                 ((0.4, 0.3, 0.2, 0.1), 4.0)])
def test_sample_radius_ks(gaussian_case, w, k):
    Z, p, exc, mask = gaussian_case
    w = np.array(w)
    g = float(p.gauge(w[None])[0])
    rt = float(p.radial_threshold(w[None])[0])
    a = p.shape
    lower = k * rt
    r = sample_radius(w, k, p, 21, size=10_000)
    assert np.all(r > lower)
    s0 = special.gammaincc(a, lower * g)
    cdf = lambda x: 1 - special.gammaincc(a, np.asarray(x) * g) / s0  # noqa: E731
    D = stats.kstest(r, cdf).statistic
    assert D < 1.628 / math.sqrt(len(r))  # asymptotic 1% critical value


def test_sample_radius_far_tail_in_log_space():
    # survival e^-1e6 underflows in linear space but not in log space
    q = constant_gauge(1, lam=1.0, c=1.0)
    r = sample_radius(np.array([1.0]), 1e6, q, 0, size=1000)
    assert np.all(np.isfinite(r)) and np.all(r > 1e6)
    assert abs((r - 1e6).mean() - 1.0) < 0.15


def test_sample_angles_all_weights_zero():
    exc = ExceedanceSet(np.array([2.0]), np.array([[1.0]]), np.array([1.0]), np.array([0]), 5)
    q = constant_gauge(1, lam=1.0, c=1.0)
    with pytest.raises(SamplingError), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sample_angles(exc, math.inf, 10, 0, q)


def test_cloud_contract(gaussian_case):
    Z, p, exc, mask = gaussian_case
    c1 = simulate_cloud(p, exc, 1.8, 70_000, 123)
    c2 = simulate_cloud(p, exc, 1.8, 70_000, 123)
    assert np.array_equal(c1.idx, c2.idx) and np.array_equal(c1.radii, c2.radii)
    pts = c1.points
    lower = 1.8 * p.radial_threshold(pts / pts.sum(axis=1, keepdims=True))
    assert np.all(pts.sum(axis=1) > lower * (1 - 1e-12))
    assert np.all(c1.radii > 1.8 * exc.thresholds[c1.idx])
    assert c1.summary()["exceedance_fraction"] == 1.0
    assert not np.array_equal(simulate_cloud(p, exc, 1.8, 1000, 124).radii, c1.radii[:1000])


def test_k1_exceedance_proportion(gaussian_case):
    Z, p, exc, mask = gaussian_case
    assert abs(exc.n / len(Z) - 0.2) <= 1 / len(Z)


def test_select_k_examples(rng):
    Z = rng.exponential(size=(500, 3))
    assert select_k(Z, ExtremeSet.all_exceed(4.1 * Z.max(axis=0))) == 4.0
    # B = {at least one component above a tiny threshold} contains every k z
    with pytest.warns(UserWarning):
        assert select_k(Z, ExtremeSet.at_least(np.full(3, 1e-9), 1)) == 1.0
    with pytest.raises(DomainError):
        select_k(np.empty((0, 3)), ExtremeSet.all_exceed(np.ones(3)))


@settings(max_examples=30)
@given(st.floats(0.5, 3.0), st.floats(1.0, 2.0))
def test_select_k_monotone_in_thresholds(base, factor):
    Z = np.random.default_rng(2).exponential(size=(300, 3))
    q = np.full(3, base) * Z.max(axis=0) / 2
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        k1 = select_k(Z, ExtremeSet.all_exceed(q))
        k2 = select_k(Z, ExtremeSet.all_exceed(q * factor))
    assert k2 >= k1


def test_blocks(gaussian_case):
    Z, p, exc, mask = gaussian_case
    bs = sample_blocks(Z, exc, 1.5, 500, 8, p, block_len=4)
    assert np.all(bs.anchor_rows + 3 < len(Z))
    assert set(bs.anchor_rows.tolist()) <= set(exc.t.tolist())
    for blk in bs.blocks(Z)[:50]:
        assert blk.angles.shape == (4, 4)
        assert np.allclose(blk.angles, Z[blk.anchor_t:blk.anchor_t + 4] / Z[blk.anchor_t:blk.anchor_t + 4].sum(
            axis=1, keepdims=True))
    one = sample_blocks(Z, exc, 1.5, 500, 8, p, block_len=1)
    idx = sample_angle_indices(exc, 1.5, 500, 8, p)
    assert np.array_equal(one.anchor_rows, exc.t[idx])


def test_block_cloud(gaussian_case):
    Z, p, exc, mask = gaussian_case
    bc = simulate_blocks(p, Z, exc, 2.0, 1000, 5, block_len=4)
    X = bc.materialise(Z)
    assert X.shape == (1000, 4, 4)
    anchors = X[:, 0, :]
    W = anchors / anchors.sum(axis=1, keepdims=True)
    assert np.all(anchors.sum(axis=1) > 2.0 * p.radial_threshold(W) * (1 - 1e-12))
    # later days keep the observed ratio to the anchor day
    t = bc.anchor_rows[bc.pos]
    assert np.allclose(X[:, 2, :] / X[:, 0, :], Z[t + 2] / Z[t], rtol=1e-10)
