"""Per-site marginal models: location-scale preprocessing, GPD tails and the
semiparametric transform to uniform and standard-exponential scales.

Covariates are a linear trend, ``H`` annual harmonic pairs and the raw
values of the three previous days. The first three days of a series have no
lags and are dropped, so every fitted quantity is indexed by the "usable"
rows ``t = 3, ..., n - 1``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from geomext import jsonio
from geomext.errors import DegenerateWarning, DomainError, ExtrapolationWarning, FitError
from geomext.ingest import GridDataset

N_LAGS = 3
YEAR = 365.25
SIGMA_FLOOR = 1e-8
MIN_EXCEEDANCES = 30


@dataclass(frozen=True)
class CovariateRow:
    linear_trend: float
    annual_harmonics: tuple[tuple[float, float], ...]
    lag_values: tuple[float, float, float]

    def as_vector(self) -> np.ndarray:
        h = [v for pair in self.annual_harmonics for v in pair]
        return np.array([1.0, self.linear_trend, *h, *self.lag_values])


def _trend(times: np.ndarray) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    span = t[-1] - t[0]
    return (t - t[0]) / (span if span > 0 else 1.0)


def harmonic_columns(days, harmonics: int) -> np.ndarray:
    ang = 2.0 * np.pi * np.asarray(days, dtype=float)[:, None] / YEAR * np.arange(1, harmonics + 1)
    out = np.empty((ang.shape[0], 2 * harmonics))
    out[:, 0::2] = np.cos(ang)
    out[:, 1::2] = np.sin(ang)
    return out


def covariate_matrix(times, series, harmonics: int = 2) -> np.ndarray:
    """Design matrix ``[1, trend, cos_1, sin_1, ..., lag_1, lag_2, lag_3]``
    for the usable rows of one site's series."""
    y = np.asarray(series, dtype=float)
    times = np.asarray(times)
    if len(y) <= N_LAGS:
        raise DomainError(f"series of length {len(y)} is too short; need at least {N_LAGS + 1}")
    if len(times) != len(y):
        raise DomainError("times and series lengths differ")
    if harmonics < 0:
        raise DomainError("harmonics must be >= 0")
    n = len(y) - N_LAGS
    lags = np.column_stack([y[N_LAGS - k:len(y) - k] for k in range(1, N_LAGS + 1)])
    return np.column_stack([
        np.ones(n),
        _trend(times)[N_LAGS:],
        harmonic_columns(times[N_LAGS:], harmonics),
        lags,
    ])


def build_covariates(dataset: GridDataset, site: int, harmonics: int = 2) -> list[CovariateRow]:
    if not 0 <= site < dataset.n_sites:
        raise DomainError(f"site index {site} out of range")
    X = covariate_matrix(dataset.times, dataset.values[:, site], harmonics)
    h = 2 * harmonics
    rows = []
    for x in X:
        pairs = tuple((float(x[2 + 2 * i]), float(x[3 + 2 * i])) for i in range(harmonics))
        rows.append(CovariateRow(float(x[1]), pairs, tuple(float(v) for v in x[2 + h:])))
    return rows


def _as_design(covariates) -> np.ndarray:
    if isinstance(covariates, np.ndarray):
        X = covariates.astype(float)
        return X[:, None] if X.ndim == 1 else X
    return np.array([c.as_vector() for c in covariates])


def scale_design(X) -> np.ndarray:
    """Columns used for the log-scale: everything except the lags."""
    X = _as_design(X)
    return X[:, :X.shape[1] - N_LAGS] if X.shape[1] > N_LAGS + 1 else X


class _Scaler:
    # Column standardisation for conditioning; the intercept column stays put.

    def __init__(self, X: np.ndarray):
        self.m = X.mean(axis=0)
        self.s = X.std(axis=0)
        self.const = self.s < 1e-12 * np.maximum(1.0, np.abs(self.m))
        self.has_const = bool(self.const.any())
        if not self.has_const:
            self.m[:] = 0.0  # centring would change the model without an intercept
        self.m[self.const] = 0.0
        self.s[self.const] = 1.0
        self.Xs = (X - self.m) / self.s

    def to_original(self, b: np.ndarray) -> np.ndarray:
        out = b / self.s
        if self.has_const:
            k = int(np.argmax(self.const))
            out[k] -= np.sum(out * self.m)
        return out


@dataclass(frozen=True)
class LocationScaleFit:
    mu_coeffs: np.ndarray
    log_sigma_coeffs: np.ndarray
    fit_loglik: float
    degenerate: bool = False
    n_iter: int = 0

    def mu(self, X) -> np.ndarray:
        return _as_design(X) @ self.mu_coeffs

    def sigma(self, X) -> np.ndarray:
        Xs = _as_design(X)
        Xs = Xs[:, :len(self.log_sigma_coeffs)]
        return np.maximum(np.exp(Xs @ self.log_sigma_coeffs), SIGMA_FLOOR)

    def to_dict(self) -> dict:
        return {
            "mu_coeffs": self.mu_coeffs.tolist(),
            "log_sigma_coeffs": self.log_sigma_coeffs.tolist(),
            "fit_loglik": self.fit_loglik,
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> LocationScaleFit:
        return cls(np.array(d["mu_coeffs"]), np.array(d["log_sigma_coeffs"]), float(d["fit_loglik"]), bool(d["degenerate"]))


def gaussian_loglik(y, mu, sigma) -> float:
    z = (y - mu) / sigma
    return float(-np.sum(np.log(sigma)) - 0.5 * np.sum(z * z) - 0.5 * len(y) * math.log(2 * math.pi))


def fit_location_scale(series, covariates, sigma_covariates=None, maxiter: int = 2000) -> LocationScaleFit:
    """Gaussian maximum likelihood with mean ``X b`` and log-sd ``V c``.

    ``covariates`` is a design matrix (or list of :class:`CovariateRow`);
    the log-sd design defaults to the same columns without the lags. A full
    length series (three more values than rows) is trimmed to the usable rows.
    """
    X = _as_design(covariates)
    V = scale_design(X) if sigma_covariates is None else _as_design(sigma_covariates)
    y = np.asarray(series, dtype=float)
    if len(y) == len(X) + N_LAGS:
        y = y[N_LAGS:]
    if len(y) != len(X) or len(V) != len(X):
        raise DomainError("series and covariates have different lengths")
    p, q = X.shape[1], V.shape[1]

    if np.ptp(y) == 0:
        warnings.warn("constant series: scale fitted at its lower bound", DegenerateWarning, stacklevel=2)
        b = np.zeros(p)
        b[0] = y[0]
        c = np.zeros(q)
        c[0] = math.log(SIGMA_FLOOR)
        return LocationScaleFit(b, c, gaussian_loglik(y, y, np.full(len(y), SIGMA_FLOOR)), degenerate=True)

    if np.linalg.matrix_rank(X) < p or np.linalg.matrix_rank(V) < q:
        raise DomainError("covariate matrix is rank deficient")

    sx, sv = _Scaler(X), _Scaler(V)
    Xs, Vs = sx.Xs, sv.Xs
    b0 = np.linalg.lstsq(Xs, y, rcond=None)[0]
    res = y - Xs @ b0
    c0 = np.zeros(q)
    c0[int(np.argmax(sv.const)) if sv.has_const else 0] = math.log(max(res.std(), SIGMA_FLOOR))
    n = len(y)

    def nll(theta):
        b, c = theta[:p], theta[p:]
        ls = Vs @ c
        sig = np.exp(ls)
        z = (y - Xs @ b) / sig
        f = np.sum(ls) + 0.5 * np.sum(z * z)
        gb = -Xs.T @ (z / sig)
        gc = Vs.T @ (1.0 - z * z)
        return f / n, np.r_[gb, gc] / n

    out = optimize.minimize(nll, np.r_[b0, c0], jac=True, method="L-BFGS-B", options={"maxiter": maxiter, "gtol": 1e-9})
    b = sx.to_original(out.x[:p])
    c = sv.to_original(out.x[p:])
    if not np.all(np.isfinite(out.x)) or out.nit >= maxiter:
        raise FitError("location-scale fit did not converge", best=(b, c))
    fit = LocationScaleFit(b, c, 0.0, n_iter=int(out.nit))
    ll = gaussian_loglik(y, fit.mu(X), fit.sigma(V))
    return LocationScaleFit(b, c, ll, n_iter=int(out.nit))


def standardize(series, fit: LocationScaleFit, covariates) -> np.ndarray:
    X = _as_design(covariates)
    y = np.asarray(series, dtype=float)
    if len(y) == len(X) + N_LAGS:
        y = y[N_LAGS:]
    return (y - fit.mu(X)) / fit.sigma(X)


# --- generalised Pareto tails -------------------------------------------------

XI_MIN = -0.5
_XI_EPS = 1e-8


def gpd_logsf(y, psi, xi) -> np.ndarray:
    """log P(Y > y) for excesses y >= 0 of a GPD(psi, xi)."""
    y = np.asarray(y, dtype=float)
    x = y / psi
    if abs(xi) < _XI_EPS:
        return -x
    a = 1.0 + xi * x
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -np.log(np.maximum(a, 0.0)) / xi
    return np.where(a > 0, out, -np.inf)


def gpd_nll_terms(y, psi, xi) -> np.ndarray:
    x = y / psi
    if abs(xi) < _XI_EPS:
        return np.log(psi) + x
    a = 1.0 + xi * x
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.log(psi) + (1.0 + 1.0 / xi) * np.log(a)
    return np.where(a > 0, t, np.inf)


@dataclass(frozen=True)
class GpdFit:
    threshold: float
    psi_coeffs: np.ndarray
    xi: float
    n_exceed: int
    loglik: float
    quantile_level: float = 0.8

    def psi(self, X) -> np.ndarray:
        return np.exp(_as_design(X) @ self.psi_coeffs)

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "psi_coeffs": self.psi_coeffs.tolist(),
            "xi": self.xi,
            "n_exceed": self.n_exceed,
            "loglik": self.loglik,
            "quantile_level": self.quantile_level,
        }

    @classmethod
    def from_dict(cls, d: dict) -> GpdFit:
        return cls(float(d["threshold"]), np.array(d["psi_coeffs"]), float(d["xi"]), int(d["n_exceed"]),
                   float(d["loglik"]), float(d["quantile_level"]))


def fit_gpd(z, covariates, quantile_level: float = 0.80, maxiter: int = 5000) -> GpdFit:
    """Non-stationary GPD for excesses of ``z`` over its empirical quantile.

    log psi is linear in the covariates, xi is constant.
    """
    z = np.asarray(z, dtype=float)
    X = _as_design(covariates)
    if len(X) != len(z):
        raise DomainError("standardized series and covariates have different lengths")
    if not 0 < quantile_level < 1:
        raise DomainError("quantile_level must lie in (0, 1)")
    u = float(np.quantile(z, quantile_level))
    m = z > u
    ne = int(np.count_nonzero(m))
    if ne < MIN_EXCEEDANCES:
        raise DomainError(f"{ne} exceedances of the threshold; need at least {MIN_EXCEEDANCES}")
    y = z[m] - u
    Xe = X[m]
    keep = Xe.std(axis=0) > 0
    keep[0] = True
    Xe_k = Xe[:, keep]
    if np.linalg.matrix_rank(Xe_k) < Xe_k.shape[1]:
        raise DomainError("GPD covariate matrix is rank deficient over the exceedances")
    sc = _Scaler(Xe_k)
    Xs = sc.Xs
    p = Xs.shape[1]

    def nll(theta):
        b, xi = theta[:p], theta[p]
        if xi <= XI_MIN:
            return np.inf
        psi = np.exp(Xs @ b)
        v = np.sum(gpd_nll_terms(y, psi, xi))
        return v / ne if np.isfinite(v) else np.inf

    def grad(theta):
        b, xi = theta[:p], theta[p]
        psi = np.exp(Xs @ b)
        x = y / psi
        if abs(xi) < _XI_EPS:
            d_eta = 1.0 - x
            d_xi = x - 0.5 * x * x
        else:
            a = np.maximum(1.0 + xi * x, 1e-300)
            d_eta = 1.0 - (1.0 + xi) * x / a
            d_xi = -np.log(a) / xi**2 + (1.0 + 1.0 / xi) * x / a
        return np.r_[Xs.T @ d_eta, np.sum(d_xi)] / ne

    b0 = np.zeros(p)
    b0[int(np.argmax(sc.const)) if sc.has_const else 0] = math.log(y.mean())
    best = None
    for xi0 in (0.1, -0.1, 0.3):
        th0 = np.r_[b0, xi0]
        if not np.isfinite(nll(th0)):
            continue
        res = optimize.minimize(nll, th0, jac=grad, method="L-BFGS-B",
                                bounds=[(None, None)] * p + [(XI_MIN, 5.0)],
                                options={"maxiter": maxiter, "gtol": 1e-10})
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise FitError("GPD fit failed from every start")
    res = optimize.minimize(nll, best.x, method="Nelder-Mead",
                            options={"maxiter": 200 * (p + 1), "xatol": 1e-10, "fatol": 1e-14})
    if res.fun < best.fun and res.x[p] > XI_MIN:
        best = res
    xi = float(best.x[p])
    coeffs = np.zeros(X.shape[1])
    coeffs[keep] = sc.to_original(best.x[:p])
    if xi <= XI_MIN + 1e-6:
        raise FitError("GPD shape estimate on the xi = -0.5 boundary; likelihood unbounded", best=(coeffs, xi))
    return GpdFit(u, coeffs, xi, ne, float(-best.fun * ne), quantile_level)


# --- semiparametric transform -------------------------------------------------


def to_exponential(u):
    u = np.asarray(u, dtype=float)
    if np.any(~(u > 0) | ~(u < 1)):
        raise DomainError("to_exponential needs u strictly inside (0, 1)")
    e = -np.log1p(-u)
    return float(e) if e.ndim == 0 else e


@dataclass(frozen=True)
class SiteMarginal:
    """Fitted marginal model of one site over the usable rows."""

    location_scale: LocationScaleFit
    gpd: GpdFit
    sorted_z: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)  # raw values on usable rows
    mu: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)
    psi: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.sorted_z)

    @property
    def z(self) -> np.ndarray:
        return (self.y - self.mu) / self.sigma

    @property
    def phi_u(self) -> float:
        """Empirical mass at or below the GPD threshold, (count <= u)/(n+1)."""
        return np.searchsorted(self.sorted_z, self.gpd.threshold, side="right") / (self.n + 1)

    def rank_cdf(self, z) -> np.ndarray:
        # average rank for sample values; (count <= z) otherwise, floored at 1
        # so that values below the sample minimum stay inside (0, 1)
        z = np.asarray(z, dtype=float)
        lo = np.searchsorted(self.sorted_z, z, side="left")
        hi = np.searchsorted(self.sorted_z, z, side="right")
        rank = np.maximum(np.where(hi > lo, lo + (hi - lo + 1) / 2.0, hi), 1.0)
        return rank / (self.n + 1)

    def log_sf(self, z, psi) -> np.ndarray:
        """log(1 - F(z)) under the spliced semiparametric CDF."""
        z = np.asarray(z, dtype=float)
        u = self.gpd.threshold
        tail = z >= u
        with np.errstate(divide="ignore"):
            below = np.log1p(-self.rank_cdf(np.where(tail, u, z)))
            above = math.log1p(-self.phi_u) + gpd_logsf(np.maximum(z - u, 0.0), psi, self.gpd.xi)
        return np.where(tail, above, below)

    def cdf(self, z, psi) -> np.ndarray:
        u = -np.expm1(self.log_sf(z, psi))
        return np.minimum(u, np.nextafter(1.0, 0.0))

    def exponential(self, z, psi) -> np.ndarray:
        return -self.log_sf(z, psi)


@dataclass(frozen=True)
class MarginalModel:
    run_id: int
    harmonics: int
    quantile_level: float
    times: np.ndarray = field(repr=False)  # day index of usable rows
    sites: tuple[SiteMarginal, ...] = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.times)

    @property
    def d(self) -> int:
        return len(self.sites)

    def row_of(self, t: int) -> int:
        i = int(np.searchsorted(self.times, t))
        if i >= len(self.times) or self.times[i] != t:
            raise DomainError(f"day {t} is not a usable row of the fitted series")
        return i

    def exponential_matrix(self) -> np.ndarray:
        """All usable rows of every site on the standard exponential scale."""
        return np.column_stack([s.exponential(s.z, s.psi) for s in self.sites])

    def uniform_matrix(self) -> np.ndarray:
        return -np.expm1(-self.exponential_matrix())

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "harmonics": self.harmonics,
            "quantile_level": self.quantile_level,
            "n": self.n,
            "sites": [
                {
                    "location_scale": s.location_scale.to_dict(),
                    "gpd": s.gpd.to_dict(),
                    "sorted_sample_digest": jsonio.digest(s.sorted_z),
                }
                for s in self.sites
            ],
        }

    @classmethod
    def from_dict(cls, d: dict, dataset: GridDataset) -> MarginalModel:
        """Rebuild from serialised coefficients and the data they were fitted on."""
        sites = []
        for j, sd in enumerate(d["sites"]):
            ls = LocationScaleFit.from_dict(sd["location_scale"])
            gp = GpdFit.from_dict(sd["gpd"])
            sm = _site_marginal(dataset, j, int(d["harmonics"]), ls, gp)
            if jsonio.digest(sm.sorted_z) != sd["sorted_sample_digest"]:
                raise DomainError(f"site {j}: data does not match the serialised marginal model")
            sites.append(sm)
        return cls(int(d["run_id"]), int(d["harmonics"]), float(d["quantile_level"]),
                   np.asarray(dataset.times[N_LAGS:]), tuple(sites))


def _site_marginal(dataset: GridDataset, site: int, harmonics: int, ls: LocationScaleFit, gp: GpdFit) -> SiteMarginal:
    X = covariate_matrix(dataset.times, dataset.values[:, site], harmonics)
    y = np.array(dataset.values[N_LAGS:, site])
    mu, sig = ls.mu(X), ls.sigma(X)
    z = (y - mu) / sig
    return SiteMarginal(ls, gp, np.sort(z), y, mu, sig, gp.psi(X))


def fit_site(dataset: GridDataset, site: int, harmonics: int = 2, quantile_level: float = 0.8) -> SiteMarginal:
    X = covariate_matrix(dataset.times, dataset.values[:, site], harmonics)
    y = dataset.values[:, site]
    ls = fit_location_scale(y, X)
    z = standardize(y, ls, X)
    gp = fit_gpd(z, X, quantile_level)
    return _site_marginal(dataset, site, harmonics, ls, gp)


def fit_marginals(dataset: GridDataset, harmonics: int = 2, quantile_level: float = 0.8) -> MarginalModel:
    sites = tuple(fit_site(dataset, j, harmonics, quantile_level) for j in range(dataset.n_sites))
    return MarginalModel(dataset.run_id, harmonics, quantile_level, np.asarray(dataset.times[N_LAGS:]), sites)


def semiparametric_cdf(z, t: int, site: int, marginal_model: MarginalModel) -> float:
    """Fitted marginal CDF at standardized value ``z`` on day ``t``."""
    sm = marginal_model.sites[site]
    psi = sm.psi[marginal_model.row_of(t)]
    return float(sm.cdf(z, psi))


def _literal_conversion(sm: SiteMarginal, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    z = (x - sm.mu[idx]) / sm.sigma[idx]
    return sm.exponential(z, sm.psi[idx])


def _nearest_index(order: np.ndarray, ys: np.ndarray, x: np.ndarray) -> np.ndarray:
    # index (into the usable rows) of the observation closest to each x; ties go to the earlier day
    pos = np.searchsorted(ys, x)
    left = np.clip(pos - 1, 0, len(ys) - 1)
    right = np.clip(pos, 0, len(ys) - 1)
    pick_right = np.abs(ys[right] - x) < np.abs(x - ys[left])
    k = np.where(pick_right, right, left)
    # among equal observed values take the earliest day
    first = np.searchsorted(ys, ys[k], side="left")
    return order[first]


def leadbetter_to_exponential(threshold_raw, site: int, marginal_model: MarginalModel, monotone: bool = True):
    """Convert raw-unit thresholds to the site's standard exponential scale.

    The threshold is standardised with the covariates of the closest
    observed raw value and passed through the fitted semiparametric CDF.
    With ``monotone=True`` the result is replaced by its running maximum
    over raw values, which makes the conversion non-decreasing.
    """
    sm = marginal_model.sites[site]
    x = np.atleast_1d(np.asarray(threshold_raw, dtype=float))
    order = np.argsort(sm.y, kind="stable")
    ys = sm.y[order]
    if np.any(x > ys[-1]) or np.any(x < ys[0]):
        warnings.warn("threshold outside the observed range; the tail branch is extrapolated",
                      ExtrapolationWarning, stacklevel=2)
    idx = _nearest_index(order, ys, x)
    q = _literal_conversion(sm, x, idx)
    if monotone:
        q = np.maximum(q, _envelope(sm, order, ys, x))
    return float(q[0]) if np.ndim(threshold_raw) == 0 else q


def _envelope(sm: SiteMarginal, order: np.ndarray, ys: np.ndarray, x: np.ndarray) -> np.ndarray:
    # running max of the literal conversion at observed values and at the
    # left limits of each switch point between neighbouring observations
    vals, first = np.unique(ys, return_index=True)
    rows = order[first]
    at_obs = _literal_conversion(sm, vals, rows)
    mids = 0.5 * (vals[:-1] + vals[1:])
    at_mid = _literal_conversion(sm, mids, rows[:-1])
    pts = np.concatenate([vals, mids])
    v = np.concatenate([at_obs, at_mid])
    o = np.argsort(pts, kind="stable")
    pts, v = pts[o], np.maximum.accumulate(v[o])
    k = np.searchsorted(pts, x, side="right") - 1
    return np.where(k >= 0, v[np.maximum(k, 0)], -np.inf)


def lag_aic_table(series, times, harmonics: int = 2) -> dict[int, float]:
    """AIC of the location-scale fit using the first 0..3 lags (report only)."""
    X = covariate_matrix(times, series, harmonics)
    base = X.shape[1] - N_LAGS
    out = {}
    for k in range(N_LAGS + 1):
        Xk = X[:, :base + k]
        fit = fit_location_scale(series, Xk, sigma_covariates=X[:, :base])
        out[k] = 2 * (Xk.shape[1] + base) - 2 * fit.fit_loglik
    return out


def rank_transform(z) -> np.ndarray:
    """Average-rank empirical CDF values rank/(n+1)."""
    z = np.asarray(z, dtype=float)
    return stats.rankdata(z, method="average") / (len(z) + 1)
