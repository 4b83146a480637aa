"""Two-stage estimation of the geometric model.

Stage one maximises a pairwise composite likelihood (gamma shape 2,
standard Gaussian gauge) for the correlation range and smoothness; its
estimates define the radial threshold. Stage two maximises the full
truncated-gamma likelihood over (lambda, phi, kappa, gamma) with the
threshold held fixed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from geomext import kernels
from geomext.errors import DegenerateWarning, DomainError, FitError
from geomext.geometry import AngularPoint, GaugeParams, calibrate_c_tau, correlation_factor, radial_angular_batch
from geomext.ingest import pairwise_distances
from geomext.special import log_gamma_sf

KAPPA_LO, KAPPA_HI = 0.05, 2.0
GAMMA_LO, GAMMA_HI = 0.05, 10.0


def _sigmoid_to(x, lo, hi):
    return lo + (hi - lo) * special.expit(x)


def _sigmoid_from(v, lo, hi):
    p = (v - lo) / (hi - lo)
    return special.logit(np.clip(p, 1e-12, 1 - 1e-12))


@dataclass(frozen=True)
class ExceedanceSet:
    """Points with ``r > r_tau(w)`` from an exponential-scale sample."""

    r: np.ndarray
    w: np.ndarray  # (n_exc, d)
    thresholds: np.ndarray
    t: np.ndarray  # row index of each point in the source sample
    n_total: int

    def __post_init__(self):
        if len(self.r) and np.any(self.r <= self.thresholds):
            raise DomainError("every stored point must strictly exceed its threshold")

    @property
    def d(self) -> int:
        return self.w.shape[1]

    @property
    def n(self) -> int:
        return len(self.r)

    @property
    def points(self) -> list[AngularPoint]:
        return [AngularPoint(float(r), w, int(t)) for r, w, t in zip(self.r, self.w, self.t)]

    @property
    def fraction(self) -> float:
        return self.n / self.n_total

    def subset(self, idx) -> ExceedanceSet:
        idx = np.asarray(idx)
        return ExceedanceSet(self.r[idx], self.w[idx], self.thresholds[idx], self.t[idx], self.n_total)

    def canonical(self) -> ExceedanceSet:
        """Copy sorted by source row (then radius) so sums have a fixed order."""
        order = np.lexsort((self.r, self.t))
        return self.subset(order)


def exceedances(exp_data, params: GaugeParams) -> tuple[ExceedanceSet, np.ndarray]:
    """Split a sample into the exceedance set and the non-exceedance mask."""
    r, W = radial_angular_batch(exp_data)
    rt = params.radial_threshold(W)
    exc = r > rt
    idx = np.flatnonzero(exc)
    return ExceedanceSet(r[idx], W[idx], rt[idx], idx, len(r)), ~exc


# --- pairwise stage -----------------------------------------------------------


@dataclass(frozen=True)
class PairwiseFit:
    phi: float
    kappa: float
    c_tau: float
    tau: float
    loglik: float
    init_loglik: float
    kappa_at_boundary: bool
    n_iter: int
    pair_c_tau: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "phi": self.phi, "kappa": self.kappa, "c_tau": self.c_tau, "tau": self.tau,
            "loglik": self.loglik, "init_loglik": self.init_loglik,
            "kappa_at_boundary": self.kappa_at_boundary, "n_iter": self.n_iter,
            "pair_c_tau": self.pair_c_tau.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> PairwiseFit:
        return cls(float(d["phi"]), float(d["kappa"]), float(d["c_tau"]), float(d["tau"]), float(d["loglik"]),
                   float(d["init_loglik"]), bool(d["kappa_at_boundary"]), int(d["n_iter"]), np.array(d["pair_c_tau"]))


def pairwise_objective(ZT, pi, pj, h, phi, kappa, tau) -> tuple[float, np.ndarray]:
    rho = np.exp(-np.power(h / phi, kappa))
    ll, cs, _ = kernels.pairwise_loglik(ZT, pi, pj, rho, tau)
    return float(ll.sum()), cs


def fit_pairwise(exp_data, dplane_coords, tau: float = 0.8, init: tuple[float, float] | None = None,
                 maxiter: int = 2000) -> PairwiseFit:
    """Composite likelihood over all site pairs for (phi, kappa) with gamma = 2."""
    X = np.asarray(exp_data, dtype=float)
    coords = np.asarray(dplane_coords, dtype=float)
    if X.ndim != 2 or X.shape[1] < 2:
        raise DomainError("pairwise fitting needs at least two sites")
    if X.shape[1] != len(coords):
        raise DomainError("data columns and coordinates differ in number")
    if not 0 < tau < 1:
        raise DomainError("tau must lie in (0, 1)")
    ZT = np.ascontiguousarray(X.T)
    pi, pj = np.triu_indices(X.shape[1], 1)
    h = pairwise_distances(coords)[pi, pj]
    phi0, kappa0 = (float(np.median(h)), 1.0) if init is None else init
    theta0 = np.array([math.log(phi0), _sigmoid_from(kappa0, KAPPA_LO, KAPPA_HI)])

    def nll(th):
        return -pairwise_objective(ZT, pi, pj, h, math.exp(th[0]), float(_sigmoid_to(th[1], KAPPA_LO, KAPPA_HI)), tau)[0]

    f0 = nll(theta0)
    best = None
    for start in (theta0, theta0 + [0.5, 0.0], theta0 + [-0.5, 1.0]):
        res = optimize.minimize(nll, start, method="Nelder-Mead",
                                options={"xatol": 1e-6, "fatol": 1e-8, "maxiter": maxiter})
        if best is None or res.fun < best.fun:
            best = res
    if not np.isfinite(best.fun):
        raise FitError("pairwise likelihood is not finite at any start", best=best.x)
    phi = math.exp(best.x[0])
    kappa = float(_sigmoid_to(best.x[1], KAPPA_LO, KAPPA_HI))
    at_boundary = kappa > KAPPA_HI - 1e-3
    if at_boundary:
        warnings.warn("pairwise kappa estimate pinned at the upper bound 2", DegenerateWarning, stacklevel=2)
    _, cs = pairwise_objective(ZT, pi, pj, h, phi, kappa, tau)
    fac = correlation_factor(coords, phi, kappa)
    r, W = radial_angular_batch(X)
    g = kernels.gauge_batch(W, fac.chol_inv, 2.0)
    c_tau = calibrate_c_tau(r, g, tau)
    return PairwiseFit(phi, kappa, c_tau, tau, -float(best.fun), -float(f0), bool(at_boundary), int(best.nit), cs)


def threshold_params(pw: PairwiseFit, dplane_coords) -> GaugeParams:
    """Initial model parameters (lambda = 1, gamma = 2) carrying the pairwise threshold."""
    return GaugeParams(lam=1.0, phi=pw.phi, kappa=pw.kappa, gamma=2.0, c_tau=pw.c_tau, tau=pw.tau,
                       dplane_coords=dplane_coords, threshold_phi=pw.phi, threshold_kappa=pw.kappa)


# --- truncated-gamma stage ----------------------------------------------------


def tg_terms(lam, gauge_values, r, thresholds, d) -> np.ndarray:
    a = lam * d
    g = np.asarray(gauge_values, dtype=float)
    return (a * np.log(g) - special.gammaln(a) + (a - 1.0) * np.log(r) - r * g
            - log_gamma_sf(np.asarray(thresholds) * g, a))


def tg_loglik(params: GaugeParams, exc: ExceedanceSet) -> float:
    """Truncated-gamma log-likelihood of the exceedances; -inf off the domain."""
    if exc.n == 0:
        return 0.0
    if np.any(exc.r <= exc.thresholds):
        return -math.inf
    try:
        g = params.gauge(exc.w)
    except (np.linalg.LinAlgError, ArithmeticError):
        return -math.inf
    with np.errstate(all="ignore"):
        terms = tg_terms(params.lam, g, exc.r, exc.thresholds, exc.d)
    if not np.all(np.isfinite(terms)):
        return -math.inf
    return float(np.sum(terms))


@dataclass(frozen=True)
class FittedGeometricModel:
    params: GaugeParams
    loglik: float
    convergence: dict
    run_id: int = 0
    trace: list = field(default_factory=list, compare=False, repr=False)

    def to_dict(self) -> dict:
        return {"params": self.params.to_dict(), "loglik": self.loglik, "convergence": self.convergence,
                "run_id": self.run_id}

    @classmethod
    def from_dict(cls, d: dict) -> FittedGeometricModel:
        return cls(GaugeParams.from_dict(d["params"]), float(d["loglik"]), dict(d["convergence"]), int(d["run_id"]))


def to_theta(p: GaugeParams) -> np.ndarray:
    return np.array([math.log(p.lam), math.log(p.phi),
                     _sigmoid_from(p.kappa, KAPPA_LO, KAPPA_HI), _sigmoid_from(p.gamma, GAMMA_LO, GAMMA_HI)])


def from_theta(theta, base: GaugeParams) -> GaugeParams:
    return base.with_(lam=math.exp(theta[0]), phi=math.exp(theta[1]),
                      kappa=float(_sigmoid_to(theta[2], KAPPA_LO, KAPPA_HI)),
                      gamma=float(_sigmoid_to(theta[3], GAMMA_LO, GAMMA_HI)))


def numerical_gradient(f, x, step: float = 1e-5) -> np.ndarray:
    g = np.empty(len(x))
    for i in range(len(x)):
        e = np.zeros(len(x))
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def fit_truncated_gamma(exc: ExceedanceSet, init: GaugeParams, n_multistart: int = 3, seed: int = 0,
                        maxiter: int = 5000, tol: float = 1e-8, grad_tol: float = 1e-3, max_restarts: int = 5,
                        run_id: int = 0) -> FittedGeometricModel:
    """Maximum likelihood for (lambda, phi, kappa, gamma) on unconstrained scales.

    Starts from ``init`` and ``n_multistart`` copies jittered by +-20%; each
    simplex search is restarted until the objective stops improving and the
    finite-difference gradient is below ``grad_tol`` (or restarts run out).
    """
    n_free = 4
    if exc.n < 10 * n_free:
        raise DomainError(f"{exc.n} exceedances; need at least {10 * n_free}")
    exc = exc.canonical()
    trace: list[tuple[int, int, float]] = []

    def nll(theta):
        try:
            p = from_theta(theta, init)
        except DomainError:
            return math.inf
        v = tg_loglik(p, exc)
        return -v if np.isfinite(v) else math.inf

    rng = np.random.default_rng(seed)
    base = init
    starts = [to_theta(base)]
    for _ in range(n_multistart):
        jit = rng.uniform(0.8, 1.2, size=4)
        p = base.with_(lam=base.lam * jit[0], phi=base.phi * jit[1],
                       kappa=float(np.clip(base.kappa * jit[2], KAPPA_LO + 1e-3, KAPPA_HI - 1e-3)),
                       gamma=float(np.clip(base.gamma * jit[3], GAMMA_LO + 1e-3, GAMMA_HI - 1e-3)))
        starts.append(to_theta(p))

    init_ll = -nll(starts[0])
    results = []
    for si, th0 in enumerate(starts):
        if not np.isfinite(nll(th0)):
            continue
        x, fun, nit, nfev = th0, nll(th0), 0, 0
        for _ in range(max_restarts):
            res = optimize.minimize(nll, x, method="Nelder-Mead",
                                    options={"xatol": 1e-10, "fatol": tol, "maxiter": maxiter, "adaptive": True})
            nit += res.nit
            nfev += res.nfev
            improved = fun - res.fun
            if res.fun <= fun:
                x, fun = res.x, res.fun
            # quasi-Newton polish on finite differences sharpens first-order optimality
            pol = optimize.minimize(nll, x, method="BFGS", options={"gtol": grad_tol / 10, "maxiter": 200})
            nfev += pol.nfev
            if np.isfinite(pol.fun) and pol.fun <= fun:
                improved += fun - pol.fun
                x, fun = pol.x, pol.fun
            trace.append((si, nit, -float(fun)))
            if improved < tol and np.max(np.abs(numerical_gradient(nll, x))) < grad_tol:
                break
        results.append((fun, si, x, nit, nfev))
    if not results:
        raise FitError("truncated-gamma likelihood is not finite at any start",
                       diagnostics={"init": init.to_dict()})
    fun, si, x, nit, nfev = min(results, key=lambda t: (t[0], t[1]))
    grad = numerical_gradient(nll, x)
    params = from_theta(x, init)
    conv = {
        "iterations": int(nit),
        "evaluations": int(nfev),
        "start": int(si),
        "grad_max_abs": float(np.max(np.abs(grad))),
        "init_loglik": float(init_ll),
        "n_exceedances": int(exc.n),
        "start_logliks": [float(-r[0]) for r in sorted(results, key=lambda t: t[1])],
    }
    return FittedGeometricModel(params, -float(fun), conv, run_id, trace)
