"""Radial-angular coordinates, gauge functions and radial thresholds.

Points on standard exponential margins are split into a radius
``r = sum(z)`` and an angle ``w = z / r`` on the unit simplex. Dependence
enters through the generalised Gaussian gauge

    g(w) = [ (w^(1/gamma))' S^-1 w^(1/gamma) ]^(gamma/2)

with S a powered-exponential correlation matrix over site coordinates.
"""

from __future__ import annotations

import warnings
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, special

from geomext import kernels
from geomext.errors import DegenerateWarning, DomainError, NumericalError
from geomext.ingest import pairwise_distances

JITTERS = (0.0, 1e-10, 1e-8)


@dataclass(frozen=True)
class AngularPoint:
    r: float
    w: np.ndarray
    t: int | None = None


def radial_angular(z, t: int | None = None) -> AngularPoint:
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise DomainError("radial_angular needs a non-negative vector")
    r = float(z.sum())
    if not r > 0:
        raise DomainError("radial_angular is undefined at the origin")
    return AngularPoint(r=r, w=z / r, t=t)


def radial_angular_batch(Z) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise radius and angle of an (n, d) matrix."""
    Z = np.asarray(Z, dtype=float)
    r = Z.sum(axis=1)
    if np.any(r <= 0):
        raise DomainError(f"{int(np.sum(r <= 0))} rows sum to zero")
    return r, Z / r[:, None]


def powexp_correlation(coords, phi: float, kappa: float) -> np.ndarray:
    """exp(-(h / phi)^kappa) over pairwise Euclidean distances h."""
    if not phi > 0:
        raise DomainError(f"phi must be positive, got {phi}")
    if not 0 < kappa <= 2:
        raise DomainError(f"kappa must lie in (0, 2], got {kappa}")
    c = np.asarray(coords, dtype=float)
    if len(c) == 1:
        return np.ones((1, 1))
    H = pairwise_distances(c)
    S = np.exp(-np.power(H / phi, kappa))
    np.fill_diagonal(S, 1.0)
    return S


@dataclass(frozen=True)
class CorrelationFactor:
    """Cholesky factorisation of a correlation matrix, jittered if needed."""

    sigma: np.ndarray
    chol: np.ndarray
    chol_inv: np.ndarray
    jitter: float

    @classmethod
    def from_matrix(cls, sigma) -> CorrelationFactor:
        S = np.asarray(sigma, dtype=float)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise DomainError("correlation matrix must be square")
        if not np.allclose(S, S.T, atol=1e-12):
            raise DomainError("correlation matrix must be symmetric")
        eye = np.eye(len(S))
        for jit in JITTERS:
            try:
                L = np.linalg.cholesky(S + jit * eye)
            except np.linalg.LinAlgError:
                continue
            if np.all(np.isfinite(L)) and np.all(np.diag(L) > 0):
                Linv = linalg.solve_triangular(L, eye, lower=True)
                return cls(sigma=S, chol=L, chol_inv=np.ascontiguousarray(Linv), jitter=jit)
        raise NumericalError(f"correlation matrix not positive definite after jitter {JITTERS[-1]:g}")

    def quad_form(self, X) -> np.ndarray:
        """x' S^-1 x for each row of X."""
        Y = np.atleast_2d(X) @ self.chol_inv.T
        return np.einsum("ij,ij->i", Y, Y)


_FACTOR_CACHE: OrderedDict = OrderedDict()
_FACTOR_CACHE_SIZE = 64


def correlation_factor(coords, phi: float, kappa: float) -> CorrelationFactor:
    """Factorised powered-exponential correlation, cached per (coords, phi, kappa)."""
    c = np.ascontiguousarray(coords, dtype=float)
    key = (c.tobytes(), c.shape, float(phi), float(kappa))
    hit = _FACTOR_CACHE.get(key)
    if hit is not None:
        _FACTOR_CACHE.move_to_end(key)
        return hit
    fac = CorrelationFactor.from_matrix(powexp_correlation(c, phi, kappa))
    _FACTOR_CACHE[key] = fac
    if len(_FACTOR_CACHE) > _FACTOR_CACHE_SIZE:
        _FACTOR_CACHE.popitem(last=False)
    return fac


def gauge(w, sigma, gamma: float):
    """Generalised Gaussian gauge of one angle (1-D ``w``) or each row of ``w``.

    ``sigma`` is a correlation matrix or a :class:`CorrelationFactor`.
    """
    if not gamma > 0:
        raise DomainError(f"gamma must be positive, got {gamma}")
    fac = sigma if isinstance(sigma, CorrelationFactor) else CorrelationFactor.from_matrix(sigma)
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise DomainError("gauge is defined on the non-negative orthant")
    g = kernels.gauge_batch(np.atleast_2d(w), fac.chol_inv, gamma)
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite gauge value")
    return float(g[0]) if w.ndim == 1 else g


def c_tau_from_quantile(shape: float, tau: float) -> float:
    """tau-quantile of the unit-rate gamma distribution with the given shape."""
    if not shape > 0:
        raise DomainError(f"shape must be positive, got {shape}")
    if not 0 < tau < 1:
        raise DomainError(f"tau must lie in (0, 1), got {tau}")
    return float(special.gammaincinv(shape, tau))


def calibrate_c_tau(r, g, tau: float) -> float:
    """Empirical tau-quantile of r * g(w).

    The returned constant leaves a fraction within 1/n of ``1 - tau`` of the
    sample strictly above the threshold ``C / g(w)``.
    """
    if not 0 < tau < 1:
        raise DomainError(f"tau must lie in (0, 1), got {tau}")
    s = np.asarray(r, dtype=float) * np.asarray(g, dtype=float)
    if s.size == 0:
        raise DomainError("empty sample")
    k = kernels.calibration_index(s.size, tau)
    c = float(np.partition(s, k)[k])
    if np.all(s == s.flat[0]):
        warnings.warn("all r*g(w) values are equal; threshold calibration is degenerate", DegenerateWarning, stacklevel=2)
    return c


@dataclass(frozen=True)
class GaugeParams:
    """Parameters of the fitted geometric model.

    ``phi``, ``kappa``, ``gamma`` and ``lam`` describe the truncated-gamma
    model; the radial threshold uses the gamma = 2 gauge at
    ``threshold_phi``/``threshold_kappa`` (the pairwise-stage estimates).
    """

    lam: float
    phi: float
    kappa: float
    gamma: float
    c_tau: float
    tau: float
    dplane_coords: np.ndarray = field(repr=False)
    threshold_phi: float | None = None
    threshold_kappa: float | None = None

    def __post_init__(self):
        coords = np.array(self.dplane_coords, dtype=float).reshape(-1, 2)
        coords.setflags(write=False)
        object.__setattr__(self, "dplane_coords", coords)
        if self.threshold_phi is None:
            object.__setattr__(self, "threshold_phi", float(self.phi))
        if self.threshold_kappa is None:
            object.__setattr__(self, "threshold_kappa", float(self.kappa))
        checks = [
            (self.lam > 0, "lam > 0"),
            (self.phi > 0, "phi > 0"),
            (0 < self.kappa <= 2, "kappa in (0, 2]"),
            (self.gamma > 0, "gamma > 0"),
            (self.c_tau > 0, "c_tau > 0"),
            (0 < self.tau < 1, "tau in (0, 1)"),
            (self.threshold_phi > 0, "threshold_phi > 0"),
            (0 < self.threshold_kappa <= 2, "threshold_kappa in (0, 2]"),
        ]
        for ok, what in checks:
            if not ok:
                raise DomainError(f"invalid gauge parameters: need {what}")

    @property
    def d(self) -> int:
        return len(self.dplane_coords)

    @property
    def shape(self) -> float:
        """Gamma shape lambda * d of the radial model."""
        return self.lam * self.d

    def factor(self) -> CorrelationFactor:
        return correlation_factor(self.dplane_coords, self.phi, self.kappa)

    def threshold_factor(self) -> CorrelationFactor:
        return correlation_factor(self.dplane_coords, self.threshold_phi, self.threshold_kappa)

    def gauge(self, W) -> np.ndarray:
        """Model gauge g(w; phi, kappa, gamma) for each row of ``W``."""
        return kernels.gauge_batch(np.atleast_2d(W), self.factor().chol_inv, self.gamma)

    def threshold_gauge(self, W) -> np.ndarray:
        return kernels.gauge_batch(np.atleast_2d(W), self.threshold_factor().chol_inv, 2.0)

    def radial_threshold(self, W) -> np.ndarray:
        return self.c_tau / self.threshold_gauge(W)

    def with_(self, **changes) -> GaugeParams:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "lam": float(self.lam),
            "phi": float(self.phi),
            "kappa": float(self.kappa),
            "gamma": float(self.gamma),
            "c_tau": float(self.c_tau),
            "tau": float(self.tau),
            "threshold_phi": float(self.threshold_phi),
            "threshold_kappa": float(self.threshold_kappa),
            "dplane_coords": self.dplane_coords.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> GaugeParams:
        return cls(
            lam=d["lam"],
            phi=d["phi"],
            kappa=d["kappa"],
            gamma=d["gamma"],
            c_tau=d["c_tau"],
            tau=d["tau"],
            dplane_coords=np.array(d["dplane_coords"], dtype=float),
            threshold_phi=d.get("threshold_phi"),
            threshold_kappa=d.get("threshold_kappa"),
        )


def radial_threshold(w, params: GaugeParams):
    """C_tau / g(w) under the gamma = 2 threshold gauge."""
    w = np.asarray(w, dtype=float)
    out = params.radial_threshold(np.atleast_2d(w))
    return float(out[0]) if w.ndim == 1 else out


def l1_simplex_check(W, tol: float = 1e-12) -> bool:
    W = np.atleast_2d(W)
    return bool(np.all(W >= 0) and np.all(np.abs(W.sum(axis=1) - 1) <= tol))


def initial_c_tau(d: int, tau: float) -> float:
    """Starting value for C_tau: the tau-quantile of Gamma(d, 1)."""
    return c_tau_from_quantile(float(d), tau)


__all__ = [
    "AngularPoint",
    "CorrelationFactor",
    "GaugeParams",
    "c_tau_from_quantile",
    "calibrate_c_tau",
    "correlation_factor",
    "gauge",
    "initial_c_tau",
    "powexp_correlation",
    "radial_angular",
    "radial_angular_batch",
    "radial_threshold",
]
