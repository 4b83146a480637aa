import json
import math

import numpy as np
import pytest
from scipy import stats

from geomext.deform import empirical_chi_matrix
from geomext.diagnostics import (
    DiagnosticSeries,
    binned_chi_series,
    empirical_chi_series,
    model_chi,
    pit_values,
    pp_points,
    pp_to_qq,
    qq_points,
)
from geomext.errors import DomainError
from geomext.fit import ExceedanceSet, exceedances
from geomext.geometry import GaugeParams, calibrate_c_tau, radial_angular_batch
from geomext.ingest import grid_coordinates
from geomext.simulate import simulate_cloud


def model_simulated_exceedances(n_exc=5000, seed=0):
    """Exceedances whose radii are drawn from the model itself (k = 1)."""
    rng = np.random.default_rng(seed)
    coords = grid_coordinates(2)
    Z = rng.exponential(size=(20_000, 4))
    p = GaugeParams(0.6, 1.2, 1.3, 1.5, 1.0, 0.8, coords)
    r, W = radial_angular_batch(Z)
    p = p.with_(c_tau=calibrate_c_tau(r, p.threshold_gauge(W), 0.8))
    exc, _ = exceedances(Z, p)
    cloud = simulate_cloud(p, exc, 1.0, n_exc, seed + 1)
    sim = ExceedanceSet(cloud.radii, cloud.angles, exc.thresholds[cloud.idx], np.arange(n_exc), 5 * n_exc)
    return sim, p, coords


@pytest.fixture(scope="module")
def well_specified():
    return model_simulated_exceedances()


def test_pit_uniform_under_model(well_specified):
    exc, p, _ = well_specified
    u = pit_values(exc, p)
    assert np.all((u > 0) & (u < 1))
    assert stats.kstest(u, "uniform").pvalue > 1e-3


def test_pp_series_shape(well_specified):
    exc, p, _ = well_specified
    pp = pp_points(exc, p, n_reps=200, rng=1)
    n = exc.n
    assert np.allclose(pp.x, np.arange(1, n + 1) / (n + 1))
    # y_i = u_(n-i+1) with u_(1) >= ... >= u_(n): ascending in x, descending in the order-statistic index
    assert np.all(np.diff(pp.y) >= 0)
    assert np.all(pp.band_lo <= pp.band_hi)
    assert pp.meta["n"] == n and pp.kind == "PP"


def test_pp_coverage_well_specified(well_specified):
    exc, p, _ = well_specified
    pp = pp_points(exc, p, n_reps=500, rng=2)
    assert pp.coverage("diagonal") >= 0.9
    assert pp.coverage("points") >= 0.9
    qq = pp_to_qq(pp)
    assert qq.coverage("diagonal") >= 0.9
    assert np.all(np.diff(qq.x) > 0)


def test_null_band_coverage(well_specified):
    exc, p, _ = well_specified
    pp = pp_points(exc, p, band="null")
    assert pp.coverage("points") >= 0.9
    with pytest.raises(DomainError):
        pp_points(exc, p, band="nope")


def test_pp_detects_misspecification(well_specified):
    exc, p, _ = well_specified
    wrong = p.with_(lam=p.lam * 1.5)
    assert pp_points(exc, wrong, n_reps=200, rng=3).coverage("diagonal") < 0.5


def test_single_exceedance(well_specified):
    exc, p, _ = well_specified
    one = exc.subset([0])
    pp = pp_points(one, p, n_reps=100)
    assert pp.x.tolist() == [0.5]
    assert pp.y[0] == pytest.approx(pit_values(one, p)[0])
    with pytest.raises(DomainError):
        pp_points(exc.subset(np.array([], dtype=int)), p)


def test_qq_transform():
    pp = DiagnosticSeries("PP", np.array([0.25, 0.5]), np.array([0.3, 0.5]))
    qq = pp_to_qq(pp)
    assert qq.x[1] == pytest.approx(math.log(2)) and qq.y[1] == pytest.approx(math.log(2))
    assert qq.kind == "QQ"


def test_qq_points_matches_pp(well_specified):
    exc, p, _ = well_specified
    sub = exc.subset(np.arange(300))
    qq = qq_points(sub, p, n_reps=100, rng=5)
    pp = pp_points(sub, p, n_reps=100, rng=5)
    assert np.allclose(qq.y, -np.log1p(-pp.y))


def test_series_validation_and_csv(tmp_path):
    with pytest.raises(DomainError):
        DiagnosticSeries("PP", np.array([0.5, 0.5]), np.array([0.1, 0.2]))
    s = DiagnosticSeries("PP", np.array([0.2, 0.4]), np.array([0.1, 0.3]), np.array([0.0, 0.2]),
                         np.array([0.3, 0.5]), {"tau": 0.8})
    s.to_csv(tmp_path / "pp.csv")
    rows = (tmp_path / "pp.csv").read_text().splitlines()
    assert rows[0] == "x,y,lo,hi" and len(rows) == 3
    assert json.loads((tmp_path / "pp.json").read_text()) == {"kind": "PP", "tau": 0.8}
    with pytest.raises(DomainError):
        DiagnosticSeries("PP", np.array([0.1]), np.array([0.1])).coverage()


def test_model_chi_independence():
    """Exact model of independent exponentials: chi(u) = 1 - u for every pair."""
    rng = np.random.default_rng(11)
    coords = grid_coordinates(2)
    Z = rng.standard_exponential((50_000, 4))
    p = GaugeParams(1.0, 1e-3, 1.0, 2.0, 1.0, 0.8, coords)
    r, W = radial_angular_batch(Z)
    p = p.with_(c_tau=calibrate_c_tau(r, p.threshold_gauge(W), 0.8))
    exc, _ = exceedances(Z, p)
    pairs = model_chi(p, exc, 0.95, coords, 200_000, 3, chi_empirical=empirical_chi_matrix(Z, 0.95))
    assert len(pairs.chi_model) == 6
    z = np.abs(pairs.chi_model - 0.05) / pairs.chi_se
    # angles come from the finite sample, so allow the sampling error of the empirical angle law too
    assert np.all(z < 4)
    assert np.all(pairs.clamped() <= 1) and np.all(pairs.chi_model <= 1 + 3 * pairs.chi_se)
    assert pairs.chi_empirical.shape == (6,)
    with pytest.raises(DomainError):
        model_chi(p, exc, 1.0, coords, 1000, 0)
    with pytest.raises(DomainError):
        model_chi(p, exc, 0.9, coords[:3], 1000, 0)


def test_chi_binning(rng):
    from geomext.diagnostics import ChiPairs
    h = rng.uniform(0, 5, size=300)
    chi = np.exp(-h)
    pairs = ChiPairs(0.99, np.arange(300), np.arange(300), h, chi, np.full(300, 0.01), chi)
    s = binned_chi_series(pairs)
    assert len(s) == 15
    assert np.all(np.diff(s.x) > 0)
    assert np.all(s.band_lo <= s.y) and np.all(s.y <= s.band_hi)
    assert len(s.meta["chi_empirical"]) == 15
    E = np.eye(4) + 0.1 * (1 - np.eye(4))
    e = empirical_chi_series(E, grid_coordinates(2), n_bins=15)
    assert e.band_lo is None and np.allclose(e.y, 0.1)
