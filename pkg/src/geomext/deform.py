"""Empirical extremal dependence and thin-plate-spline spatial deformation.

The deformation maps G-plane (geographic) coordinates to D-plane
coordinates in which pairwise chi(u) follows a stationary isotropic
Brown-Resnick form ``2 - 2 Phi(sqrt((h / rho)^alpha) / 2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from geomext import kernels
from geomext.errors import DegeneracyError, DomainError, FitError
from geomext.ingest import pairwise_distances

COLLAPSE_TOL = 1e-6
MIN_EXPECTED_EXCEEDANCES = 20


@dataclass(frozen=True)
class ChiMatrix:
    u: float
    estimates: np.ndarray
    pair_counts: np.ndarray

    @property
    def d(self) -> int:
        return len(self.estimates)


def empirical_chi_matrix(exp_data, u: float) -> ChiMatrix:
    """chi(u) for every site pair.

    A site exceeds when its value is above the ``m``-th largest value of its
    column, with ``m = round(n (1 - u))``; entries are joint counts over m.
    """
    X = np.asarray(exp_data, dtype=float)
    if not 0 < u < 1:
        raise DomainError(f"u must lie in (0, 1), got {u}")
    n, d = X.shape
    expected = n * (1.0 - u)
    if expected < MIN_EXPECTED_EXCEEDANCES:
        raise DomainError(f"n(1-u) = {expected:.3g} expected exceedances; need at least {MIN_EXPECTED_EXCEEDANCES}")
    m = int(round(expected))
    q = np.partition(X, n - m - 1, axis=0)[n - m - 1]
    C = kernels.joint_exceedance_counts(X > q)
    chi = np.clip(C / m, 0.0, 1.0)
    np.fill_diagonal(chi, 1.0)
    return ChiMatrix(float(u), chi, C)


def br_chi(h, rho: float, alpha: float):
    """Brown-Resnick pairwise chi at distance ``h``."""
    if not rho > 0:
        raise DomainError(f"rho must be positive, got {rho}")
    if not 0 < alpha <= 2:
        raise DomainError(f"alpha must lie in (0, 2], got {alpha}")
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise DomainError("distances must be non-negative")
    # 2 - 2 Phi(x) = erfc(x / sqrt 2)
    out = special.erfc(np.sqrt(np.power(h / rho, alpha)) / (2.0 * math.sqrt(2.0)))
    return float(out) if out.ndim == 0 else out


def tps_kernel(r) -> np.ndarray:
    """eta(r) = r^2 log r with eta(0) = 0."""
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = r * r * np.log(r)
    return np.where(r > 0, out, 0.0)


def _cross_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


@dataclass(frozen=True)
class Deformation:
    """Thin-plate spline ``q(s) = c + A s + sum_k w_k eta(|s - a_k|)``.

    ``affine`` is 2 x 3 with rows ``[c, A_x, A_y]`` per output coordinate;
    ``spline_weights`` is K x 2.
    """

    anchors: np.ndarray
    affine: np.ndarray
    spline_weights: np.ndarray
    br_rho: float
    br_alpha: float
    objective: float = math.nan
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __call__(self, coords) -> np.ndarray:
        return apply_deformation(self, coords)

    def bending_energy(self) -> float:
        return bending_energy(self.anchors, self.spline_weights)

    def to_dict(self) -> dict:
        return {
            "anchors": np.asarray(self.anchors).tolist(),
            "affine": np.asarray(self.affine).tolist(),
            "spline_weights": np.asarray(self.spline_weights).tolist(),
            "br_rho": self.br_rho,
            "br_alpha": self.br_alpha,
            "objective": self.objective,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Deformation:
        return cls(np.array(d["anchors"], dtype=float), np.array(d["affine"], dtype=float),
                   np.array(d["spline_weights"], dtype=float), float(d["br_rho"]), float(d["br_alpha"]),
                   float(d.get("objective", math.nan)), dict(d.get("meta", {})))


def apply_deformation(deformation: Deformation, coords) -> np.ndarray:
    c = np.atleast_2d(np.asarray(coords, dtype=float))
    A = np.asarray(deformation.affine)
    out = A[:, 0] + c @ A[:, 1:].T
    W = np.asarray(deformation.spline_weights)
    if W.size:
        out = out + tps_kernel(_cross_distances(c, np.asarray(deformation.anchors))) @ W
    return out


def bending_energy(anchors, weights) -> float:
    """sum over output coordinates of w' K w."""
    K = tps_kernel(pairwise_distances(anchors))
    W = np.asarray(weights)
    return float(np.einsum("kd,kl,ld->", W, K, W))


def identity_deformation(anchors, rho: float = 1.0, alpha: float = 1.0) -> Deformation:
    a = np.asarray(anchors, dtype=float)
    return Deformation(a, np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]), np.zeros_like(a), rho, alpha)


def _tps_system(anchors: np.ndarray) -> np.ndarray:
    k = len(anchors)
    L = np.zeros((k + 3, k + 3))
    L[:k, :k] = tps_kernel(pairwise_distances(anchors))
    P = np.column_stack([np.ones(k), anchors])
    L[:k, k:] = P
    L[k:, :k] = P.T
    return L


def interpolating_spline(anchors, images) -> tuple[np.ndarray, np.ndarray]:
    """Weights (K x 2) and affine part (2 x 3) of the spline with q(a_k) = images_k."""
    a = np.asarray(anchors, dtype=float)
    Y = np.asarray(images, dtype=float)
    rhs = np.vstack([Y, np.zeros((3, 2))])
    sol = np.linalg.solve(_tps_system(a), rhs)
    return sol[:len(a)], sol[len(a):].T


def default_anchors(coords, count: int | None = None) -> np.ndarray:
    """Indices of ``count`` spread-out anchor sites (default a quarter of the
    sites, at least 3) chosen by farthest-point selection from site 0."""
    c = np.asarray(coords, dtype=float)
    d = len(c)
    if count is None:
        count = max(3, int(round(d / 4)))
    if not 3 <= count <= d:
        raise DomainError(f"anchor count must lie in [3, {d}], got {count}")
    chosen = [0]
    dist = np.linalg.norm(c - c[0], axis=1)
    while len(chosen) < count:
        nxt = int(np.argmax(dist))  # first index among ties
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(c - c[nxt], axis=1))
    return np.array(sorted(chosen))


def _anchor_indices(coords: np.ndarray, anchors) -> np.ndarray:
    a = np.asarray(anchors)
    if a.ndim == 1 and np.issubdtype(a.dtype, np.integer):
        idx = a.astype(int)
        if np.any(idx < 0) or np.any(idx >= len(coords)):
            raise DomainError("anchor index out of range")
    else:
        a = np.atleast_2d(a.astype(float))
        idx = []
        for p in a:
            hit = np.flatnonzero(np.all(np.isclose(coords, p, atol=1e-12), axis=1))
            if len(hit) == 0:
                raise DomainError(f"anchor {tuple(p)} is not one of the site coordinates")
            idx.append(int(hit[0]))
        idx = np.array(idx)
    if len(set(idx.tolist())) != len(idx):
        raise DomainError("anchors must be distinct")
    if len(idx) < 3:
        raise DomainError(f"need at least 3 anchors, got {len(idx)}")
    pts = coords[idx]
    if np.linalg.matrix_rank(pts[1:] - pts[0], tol=1e-9) < 2:
        raise DomainError("anchors are collinear")
    return idx


def chi_objective(dcoords, chi_hat, rho, alpha) -> float:
    iu = np.triu_indices(len(dcoords), 1)
    h = pairwise_distances(dcoords)[iu]
    r = br_chi(h, rho, alpha) - np.asarray(chi_hat)[iu]
    return float(r @ r)


@dataclass
class _Problem:
    coords: np.ndarray
    chi_upper: np.ndarray
    anchor_idx: np.ndarray
    penalty: float
    iu: tuple = field(init=False)
    U: np.ndarray = field(init=False)
    Linv: np.ndarray = field(init=False)

    def __post_init__(self):
        self.iu = np.triu_indices(len(self.coords), 1)
        a = self.coords[self.anchor_idx]
        self.U = tps_kernel(_cross_distances(self.coords, a))
        self.Linv = np.linalg.inv(_tps_system(a))
        self.P = np.column_stack([np.ones(len(self.coords)), self.coords])
        self.K = tps_kernel(pairwise_distances(a))

    @property
    def anchors(self) -> np.ndarray:
        return self.coords[self.anchor_idx]

    def images(self, theta: np.ndarray) -> np.ndarray:
        a = self.anchors
        free = theta[:-2].reshape(-1, 2)
        return np.vstack([a[:2], free])

    def map(self, images: np.ndarray):
        k = len(images)
        sol = self.Linv[:, :k] @ images
        W, aff = sol[:k], sol[k:]
        return self.P @ aff + self.U @ W, W, aff.T

    @staticmethod
    def rho_alpha(theta) -> tuple[float, float]:
        return math.exp(theta[-2]), 2.0 * special.expit(theta[-1])

    def objective(self, theta) -> float:
        rho, alpha = self.rho_alpha(theta)
        if not (np.isfinite(rho) and rho > 0 and alpha > 0):
            return np.inf
        D, W, _ = self.map(self.images(theta))
        h = pairwise_distances(D)[self.iu]
        if h.min() < COLLAPSE_TOL:
            return 1e6
        r = special.erfc(np.sqrt(np.power(h / rho, alpha)) / (2.0 * math.sqrt(2.0))) - self.chi_upper
        return float(r @ r) + self.penalty * float(np.einsum("kd,kl,ld->", W, self.K, W))


def fit_deformation(coords, chi_hat, anchors=None, init: tuple[float, float] | None = None,
                    penalty: float = 1e-3, n_starts: int = 5, seed: int = 0,
                    maxiter: int = 20000, tol: float = 1e-8) -> Deformation:
    """Fit the spline and Brown-Resnick (rho, alpha) to an empirical chi matrix.

    Free parameters are the D-plane images of the anchors (the first two are
    held at their G-plane positions, removing translation, rotation and
    scale) plus log rho and logit(alpha / 2). The identity map with its best
    (rho, alpha) is always one of the starts, so the fit never does worse.
    """
    coords = np.asarray(coords, dtype=float)
    chi = chi_hat.estimates if isinstance(chi_hat, ChiMatrix) else np.asarray(chi_hat, dtype=float)
    if chi.shape != (len(coords), len(coords)):
        raise DomainError("chi matrix does not match the number of sites")
    idx = _anchor_indices(coords, default_anchors(coords) if anchors is None else anchors)
    prob = _Problem(coords, chi[np.triu_indices(len(coords), 1)], idx, penalty)

    # stage 1: (rho, alpha) under the identity map
    base = prob.anchors[2:].ravel()
    h_g = pairwise_distances(coords)[prob.iu]
    rho0 = float(np.median(h_g)) if init is None else float(init[0])
    alpha0 = 1.0 if init is None else float(init[1])
    ra0 = np.array([math.log(rho0), special.logit(min(alpha0, 1.999) / 2.0)])
    best_ra = None
    for start in (ra0, ra0 + [1.0, 0.0], ra0 - [1.0, 0.0], ra0 + [0.0, 1.5]):
        r = optimize.minimize(lambda th: prob.objective(np.r_[base, th]), start, method="Nelder-Mead",
                              options={"xatol": 1e-10, "fatol": tol, "maxiter": 2000})
        if best_ra is None or r.fun < best_ra.fun:
            best_ra = r
    identity_theta = np.r_[base, best_ra.x]
    identity_obj = prob.objective(identity_theta)

    # stage 2: full fit from the identity and jittered starts
    rng = np.random.default_rng(seed)
    spacing = float(np.min(h_g))
    starts = [identity_theta]
    for _ in range(n_starts):
        th = identity_theta.copy()
        th[:-2] += rng.normal(scale=0.1 * spacing, size=len(th) - 2)
        th[-2:] += rng.normal(scale=0.1, size=2)
        starts.append(th)
    best = None
    for th0 in starts:
        r = optimize.minimize(prob.objective, th0, method="Nelder-Mead",
                              options={"xatol": 1e-9, "fatol": tol, "maxiter": maxiter, "adaptive": True})
        if np.isfinite(r.fun) and (best is None or r.fun < best.fun):
            best = r
    if best is None:
        raise FitError("deformation fit failed from every start", best=identity_theta)
    if best.fun > identity_obj:
        best_x, best_fun = identity_theta, identity_obj
    else:
        best_x, best_fun = best.x, best.fun

    D, W, aff = prob.map(prob.images(best_x))
    rho, alpha = prob.rho_alpha(best_x)
    if pairwise_distances(D)[prob.iu].min() < COLLAPSE_TOL:
        raise DegeneracyError("deformation collapsed two sites onto each other", best=best_x)
    return Deformation(prob.anchors.copy(), aff, W, rho, alpha, float(best_fun),
                       meta={"identity_objective": float(identity_obj), "anchor_indices": idx.tolist(),
                             "penalty": penalty, "n_starts": n_starts})


def binned_residual_sd(h, resid, n_bins: int = 5) -> float:
    """Mean within-bin standard deviation of ``resid`` over equal-count bins of ``h``."""
    h = np.asarray(h, dtype=float)
    resid = np.asarray(resid, dtype=float)
    order = np.argsort(h, kind="stable")
    sds = [np.std(resid[b]) for b in np.array_split(order, n_bins) if len(b) > 1]
    return float(np.mean(sds))
