"""PP/QQ goodness-of-fit series and empirical versus model chi(u; h)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from geomext import jsonio
from geomext.errors import DomainError
from geomext.fit import ExceedanceSet, fit_truncated_gamma
from geomext.ingest import pairwise_distances
from geomext.simulate import as_seed_sequence, simulate_cloud
from geomext.special import log_gamma_sf


@dataclass(frozen=True)
class DiagnosticSeries:
    kind: str  # "PP", "QQ" or "CHI"
    x: np.ndarray
    y: np.ndarray
    band_lo: np.ndarray | None = None
    band_hi: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.x) > 1 and np.any(np.diff(self.x) <= 0):
            raise DomainError("diagnostic x values must be strictly increasing")

    def __len__(self) -> int:
        return len(self.x)

    def coverage(self, reference: str = "diagonal") -> float:
        """Fraction of points whose reference value lies inside the band.

        ``"diagonal"`` checks the model line y = x against the bootstrap band
        of the empirical order statistics; ``"points"`` checks the plotted y.
        """
        if self.band_lo is None:
            raise DomainError("series has no band")
        ref = self.x if reference == "diagonal" else self.y
        return float(np.mean((self.band_lo <= ref) & (ref <= self.band_hi)))

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "lo", "hi"])
            lo = self.band_lo if self.band_lo is not None else np.full(len(self), np.nan)
            hi = self.band_hi if self.band_hi is not None else np.full(len(self), np.nan)
            for row in zip(self.x, self.y, lo, hi):
                w.writerow([format(float(v), ".17g") for v in row])
        jsonio.dump({"kind": self.kind, **self.meta}, path.with_suffix(".json"))


def _params(model):
    return model.params if hasattr(model, "params") else model


def pit_values(exc: ExceedanceSet, model) -> np.ndarray:
    """F~(r | w, r_tau(w)): truncated-gamma CDF of each exceedance radius."""
    p = _params(model)
    g = p.gauge(exc.w)
    lr = log_gamma_sf(exc.r * g, p.shape)
    lt = log_gamma_sf(exc.thresholds * g, p.shape)
    return -np.expm1(lr - lt)


def _bands(u_sorted: np.ndarray, n_reps: int, level: float, rng) -> tuple[np.ndarray, np.ndarray]:
    gen = np.random.default_rng(as_seed_sequence(rng))
    n = len(u_sorted)
    reps = np.sort(u_sorted[gen.integers(0, n, size=(n_reps, n))], axis=1)
    a = (1 - level) / 2
    lo, hi = np.quantile(reps, [a, 1 - a], axis=0)
    return lo, hi


def _null_bands(n: int, level: float) -> tuple[np.ndarray, np.ndarray]:
    # i-th smallest of n uniforms is Beta(i, n - i + 1)
    i = np.arange(1, n + 1)
    a = (1 - level) / 2
    return stats.beta.ppf(a, i, n - i + 1), stats.beta.ppf(1 - a, i, n - i + 1)


def _refit_bands(exc: ExceedanceSet, model, n_reps: int, level: float, rng) -> tuple[np.ndarray, np.ndarray]:
    gen = np.random.default_rng(as_seed_sequence(rng))
    p = _params(model)
    reps = np.empty((n_reps, exc.n))
    for b in range(n_reps):
        sub = exc.subset(gen.integers(0, exc.n, size=exc.n))
        fm = fit_truncated_gamma(sub, p, n_multistart=0)
        reps[b] = np.sort(pit_values(sub, fm))
    a = (1 - level) / 2
    lo, hi = np.quantile(reps, [a, 1 - a], axis=0)
    return lo, hi


def pp_points(exc: ExceedanceSet, model, n_reps: int = 500, level: float = 0.95, rng=0,
              band: str = "bootstrap") -> DiagnosticSeries:
    """Points (i/(n+1), u_(n-i+1)) with u_(1) >= ... >= u_(n); y rises with x.

    ``band="bootstrap"`` resamples the PIT values, ``band="refit"`` refits
    the model on every resample (slow) and ``band="null"`` gives the exact
    Beta bands of uniform order statistics.
    """
    if exc.n == 0:
        raise DomainError("no exceedances")
    u = np.sort(pit_values(exc, model))
    n = len(u)
    x = np.arange(1, n + 1) / (n + 1)
    if band == "bootstrap":
        lo, hi = _bands(u, n_reps, level, rng)
    elif band == "refit":
        lo, hi = _refit_bands(exc, model, n_reps, level, rng)
    elif band == "null":
        lo, hi = _null_bands(n, level)
    else:
        raise DomainError(f"unknown band type {band!r}")
    return DiagnosticSeries("PP", x, u, lo, hi, {"n": n, "level": level, "band": band, "tau": _params(model).tau})


def qq_points(exc: ExceedanceSet, model, n_reps: int = 500, level: float = 0.95, rng=0,
              band: str = "bootstrap") -> DiagnosticSeries:
    """PP series with both axes mapped through -log(1 - .)."""
    pp = pp_points(exc, model, n_reps, level, rng, band)
    return pp_to_qq(pp)


def pp_to_qq(pp: DiagnosticSeries) -> DiagnosticSeries:
    f = lambda v: -np.log1p(-np.asarray(v))  # noqa: E731
    lo = None if pp.band_lo is None else f(pp.band_lo)
    hi = None if pp.band_hi is None else f(pp.band_hi)
    return DiagnosticSeries("QQ", f(pp.x), f(pp.y), lo, hi, dict(pp.meta))


@dataclass(frozen=True)
class ChiPairs:
    """Per-pair chi estimates; ``chi_model`` is unclamped."""

    u: float
    i: np.ndarray
    j: np.ndarray
    h: np.ndarray
    chi_model: np.ndarray
    chi_se: np.ndarray
    chi_empirical: np.ndarray | None = None

    def clamped(self) -> np.ndarray:
        return np.clip(self.chi_model, 0.0, 1.0)

    def series(self, n_bins: int = 15) -> DiagnosticSeries:
        return binned_chi_series(self, n_bins)


def model_chi(model, exc: ExceedanceSet, u: float, coords, m_sim: int, rng, chi_empirical=None) -> ChiPairs:
    """Model chi(u) for every site pair from one k = 1 cloud.

    A point lies in the pair region when both components exceed -log(1-u),
    i.e. ``r * min(w_i, w_j) > -log(1-u)``.
    """
    if not 0 < u < 1:
        raise DomainError("u must lie in (0, 1)")
    coords = np.asarray(coords, dtype=float)
    d = exc.d
    if len(coords) != d:
        raise DomainError("coordinates do not match the model dimension")
    cloud = simulate_cloud(model, exc, 1.0, m_sim, rng)
    q = -math.log1p(-u)
    W = exc.w
    pi, pj = np.triu_indices(d, 1)
    H = pairwise_distances(coords)
    p_exc = exc.n / exc.n_total
    chi = np.empty(len(pi))
    se = np.empty(len(pi))
    for k, (a, b) in enumerate(zip(pi, pj)):
        with np.errstate(divide="ignore"):
            crit = q / np.minimum(W[:, a], W[:, b])
        hits = np.count_nonzero(cloud.radii > crit[cloud.idx])
        f = hits / m_sim
        chi[k] = f * p_exc / (1 - u)
        se[k] = math.sqrt(f * (1 - f) / m_sim) * p_exc / (1 - u)
    emp = None
    if chi_empirical is not None:
        E = chi_empirical.estimates if hasattr(chi_empirical, "estimates") else np.asarray(chi_empirical)
        emp = E[pi, pj]
    return ChiPairs(float(u), pi, pj, H[pi, pj], chi, se, emp)


def binned_chi_series(pairs: ChiPairs, n_bins: int = 15) -> DiagnosticSeries:
    """Equal-count distance bins; y is the mean model chi, band +-1.96 s.e."""
    order = np.argsort(pairs.h, kind="stable")
    groups = [g for g in np.array_split(order, min(n_bins, len(order))) if len(g)]
    xs, ys, ses, emp = [], [], [], []
    for g in groups:
        x = float(np.mean(pairs.h[g]))
        if xs and x <= xs[-1]:
            continue
        xs.append(x)
        ys.append(float(np.mean(pairs.chi_model[g])))
        ses.append(float(np.sqrt(np.sum(pairs.chi_se[g] ** 2)) / len(g)))
        if pairs.chi_empirical is not None:
            emp.append(float(np.mean(pairs.chi_empirical[g])))
    y = np.array(ys)
    s = np.array(ses)
    meta = {"u": pairs.u, "n_pairs": int(len(pairs.h))}
    if emp:
        meta["chi_empirical"] = emp
    return DiagnosticSeries("CHI", np.array(xs), y, np.clip(y - 1.96 * s, 0, None), y + 1.96 * s, meta)


def empirical_chi_series(chi_matrix, coords, n_bins: int = 15) -> DiagnosticSeries:
    E = chi_matrix.estimates if hasattr(chi_matrix, "estimates") else np.asarray(chi_matrix)
    pi, pj = np.triu_indices(len(E), 1)
    H = pairwise_distances(coords)
    pairs = ChiPairs(getattr(chi_matrix, "u", math.nan), pi, pj, H[pi, pj], E[pi, pj], np.zeros(len(pi)))
    s = binned_chi_series(pairs, n_bins)
    return DiagnosticSeries("CHI", s.x, s.y, None, None, s.meta)
