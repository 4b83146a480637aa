"""Synthetic datasets with known dependence structure."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import special

from geomext.errors import DomainError, SamplingError
from geomext.geometry import correlation_factor, powexp_correlation
from geomext.ingest import GridDataset, grid_coordinates

MIN_ACCEPTANCE = 1e-4


class Kind(str, Enum):
    META_GAUSSIAN = "MetaGaussian"
    INDEPENDENT_EXP = "IndependentExp"
    COMONOTONE = "Comonotone"
    KNOWN_GAUGE_REJECTION = "KnownGaugeRejection"


@dataclass(frozen=True)
class SyntheticSpec:
    kind: Kind | str
    d: int
    n: int
    phi: float = 1.0
    kappa: float = 1.5
    seed: int = 0
    # KnownGaugeRejection only: gauge exponent, shape multiplier and radial window
    gamma: float = 2.0
    lam: float = 1.0
    r_window: tuple[float, float] = (0.0, 10.0)
    run_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.d < 1 or self.n < 1:
            raise DomainError("d and n must be positive")
        if not self.phi > 0 or not 0 < self.kappa <= 2:
            raise DomainError("need phi > 0 and kappa in (0, 2]")
        if not self.gamma > 0 or not self.lam > 0:
            raise DomainError("need gamma > 0 and lam > 0")
        lo, hi = self.r_window
        if not 0 <= lo < hi < math.inf:
            raise DomainError("r_window must satisfy 0 <= lo < hi < inf")

    def coords(self) -> np.ndarray:
        return site_coordinates(self.d)


def site_coordinates(d: int) -> np.ndarray:
    """Square grid when ``d`` is a perfect square, otherwise a single row."""
    side = math.isqrt(d)
    if side * side == d:
        return grid_coordinates(side)
    return np.column_stack([np.ones(d), np.arange(1, d + 1)]).astype(float)


def exponential_from_normal(x) -> np.ndarray:
    """-log(1 - Phi(x)), accurate in both tails."""
    return -special.log_ndtr(-np.asarray(x, dtype=float))


def _meta_gaussian(spec: SyntheticSpec, rng) -> np.ndarray:
    L = correlation_factor(spec.coords(), spec.phi, spec.kappa).chol
    X = rng.standard_normal((spec.n, spec.d)) @ L.T
    return exponential_from_normal(X)


def _known_gauge(spec: SyntheticSpec, rng) -> np.ndarray:
    # density of (r, w) proportional to r^(lam d - 1) exp(-r g(w)) on the radial
    # window with Lebesgue measure on the simplex. The angular marginal is
    # proportional to g(w)^-a P(lo < Gamma(a, g(w)) < hi); w is drawn by rejection
    # from the uniform law using the bound g >= g_min, then r given w exactly.
    fac = correlation_factor(spec.coords(), spec.phi, spec.kappa)
    a = spec.lam * spec.d
    lo, hi = spec.r_window
    q_min = 1.0 / np.linalg.eigvalsh(fac.sigma)[-1]
    g_min = (q_min * min(1.0, spec.d ** (1.0 - 2.0 / spec.gamma))) ** (spec.gamma / 2.0)
    out_w = np.empty((0, spec.d))
    proposed = 0
    batch = max(1000, 2 * spec.n)
    while len(out_w) < spec.n:
        W = rng.dirichlet(np.ones(spec.d), size=batch)
        X = np.power(W, 1.0 / spec.gamma) @ fac.chol_inv.T
        g = np.einsum("ij,ij->i", X, X) ** (spec.gamma / 2.0)
        mass = special.gammainc(a, hi * g) - special.gammainc(a, lo * g)
        keep = rng.uniform(size=batch) < (g_min / g) ** a * mass
        proposed += batch
        out_w = np.vstack([out_w, W[keep]])
        if proposed >= 20 * batch and len(out_w) / proposed < MIN_ACCEPTANCE:
            raise SamplingError(f"rejection acceptance rate {len(out_w) / proposed:.2e} is below "
                                f"{MIN_ACCEPTANCE:g}; choose a different radial window")
    W = out_w[:spec.n]
    X = np.power(W, 1.0 / spec.gamma) @ fac.chol_inv.T
    g = np.einsum("ij,ij->i", X, X) ** (spec.gamma / 2.0)
    plo, phi_ = special.gammainc(a, lo * g), special.gammainc(a, hi * g)
    r = special.gammaincinv(a, plo + rng.uniform(size=spec.n) * (phi_ - plo)) / g
    return r[:, None] * W


def generate_matrix(spec: SyntheticSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    if spec.kind is Kind.META_GAUSSIAN:
        return _meta_gaussian(spec, rng)
    if spec.kind is Kind.INDEPENDENT_EXP:
        return rng.standard_exponential((spec.n, spec.d))
    if spec.kind is Kind.COMONOTONE:
        return np.repeat(rng.standard_exponential((spec.n, 1)), spec.d, axis=1)
    return _known_gauge(spec, rng)


def generate(spec: SyntheticSpec) -> GridDataset:
    """Dataset with day index 0..n-1; columns follow :func:`site_coordinates`."""
    return GridDataset(run_id=spec.run_id, sites=spec.coords(), times=np.arange(spec.n),
                       values=generate_matrix(spec))


def correlation(spec: SyntheticSpec) -> np.ndarray:
    return powexp_correlation(spec.coords(), spec.phi, spec.kappa)
