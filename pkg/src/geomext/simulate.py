"""Extrapolation sampling beyond the radial threshold.

Angles are resampled from the observed exceedances with importance weights
``IW(w) = Fbar(k r_tau(w)) / Fbar(r_tau(w))`` and radii are drawn from the
fitted truncated gamma above ``k r_tau(w)``. Clouds store angle indices and
radii; points are formed only on request.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from geomext.errors import DomainError, SamplingError, UnderflowWarning
from geomext.fit import ExceedanceSet, FittedGeometricModel
from geomext.geometry import GaugeParams
from geomext.special import gamma_isf_log, log_gamma_sf

CHUNK = 1 << 16
DEFAULT_K_GRID = np.round(np.arange(100, 401) / 100.0, 2)


def _params(model) -> GaugeParams:
    return model.params if isinstance(model, FittedGeometricModel) else model


def as_seed_sequence(rng) -> np.random.SeedSequence:
    """Normalise an int, SeedSequence or Generator into a SeedSequence."""
    if isinstance(rng, np.random.SeedSequence):
        # fresh copy: spawning mutates the sequence and would break repeatability
        return np.random.SeedSequence(rng.entropy, spawn_key=rng.spawn_key, pool_size=rng.pool_size)
    if isinstance(rng, np.random.Generator):
        return np.random.SeedSequence(int(rng.integers(2**63)))
    return np.random.SeedSequence(int(rng))


def _generator(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(as_seed_sequence(rng))


def _check_k(k: float) -> None:
    if not k >= 1:
        raise DomainError(f"extrapolation level k must be >= 1, got {k}")


def log_importance_weights(W, k: float, params: GaugeParams, thresholds=None) -> np.ndarray:
    _check_k(k)
    W = np.atleast_2d(W)
    g = params.gauge(W)
    rt = params.radial_threshold(W) if thresholds is None else np.asarray(thresholds, dtype=float)
    if k == 1:
        return np.zeros(len(W))
    a = params.shape
    num = log_gamma_sf(k * rt * g, a)
    den = log_gamma_sf(rt * g, a)
    with np.errstate(invalid="ignore"):
        out = num - den
    both = np.isneginf(num) & np.isneginf(den)
    if np.any(both):
        warnings.warn(f"{int(both.sum())} importance weights underflowed to 0", UnderflowWarning, stacklevel=2)
        out[both] = -np.inf
    return out


def importance_weight(w, k: float, params: GaugeParams, thresholds=None):
    """IW(w) in (0, 1]; 0 when both survival terms underflow."""
    w = np.asarray(w, dtype=float)
    out = np.exp(log_importance_weights(w, k, _params(params), thresholds))
    return float(out[0]) if w.ndim == 1 else out


def estimate_p_rprime_gt_k(exc: ExceedanceSet, k: float, params) -> float:
    """P(R' > k | R' > 1) as the mean importance weight over the exceedances."""
    if exc.n == 0:
        raise DomainError("empty exceedance set")
    if k == 1:
        return 1.0
    return float(np.mean(importance_weight(exc.w, k, _params(params), exc.thresholds)))


def _selection_probs(logw: np.ndarray) -> np.ndarray:
    if not np.any(np.isfinite(logw)):
        raise SamplingError("every importance weight underflowed to zero; use a smaller k")
    p = np.exp(logw - np.max(logw))
    return p / p.sum()


def _weighted_indices(logw: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    if m < 1:
        raise DomainError("m must be >= 1")
    p = _selection_probs(logw)
    return rng.choice(len(p), size=m, p=p)


def sample_angle_indices(exc: ExceedanceSet, k: float, m: int, rng, params) -> np.ndarray:
    logw = log_importance_weights(exc.w, k, _params(params), exc.thresholds)
    return _weighted_indices(logw, m, _generator(rng))


def sample_angles(exc: ExceedanceSet, k: float, m: int, rng, params) -> np.ndarray:
    """``m`` exceedance angles drawn with probability proportional to IW(w; k)."""
    return exc.w[sample_angle_indices(exc, k, m, rng, params)]


def sample_radius(w, k: float, params, rng, thresholds=None, size: int | None = None):
    """Inverse-CDF draws from the truncated gamma above ``k r_tau(w)``.

    ``w`` is one angle (then ``size`` draws are returned, or a scalar) or a
    matrix of angles (one draw per row).
    """
    _check_k(k)
    p = _params(params)
    gen = _generator(rng)
    w = np.asarray(w, dtype=float)
    single = w.ndim == 1
    W = np.atleast_2d(w)
    g = p.gauge(W)
    rt = p.radial_threshold(W) if thresholds is None else np.asarray(thresholds, dtype=float)
    if single and size is not None:
        g = np.repeat(g, size)
        rt = np.repeat(rt, size)
    lower = k * rt
    log_s = log_gamma_sf(lower * g, p.shape)
    if np.any(np.isneginf(log_s)):
        raise SamplingError("truncated-gamma survival underflowed at k * r_tau(w)")
    u = gen.uniform(size=len(g))
    r = gamma_isf_log(np.log(u) + log_s, p.shape) / g
    r = np.maximum(r, np.nextafter(lower, np.inf))
    if single and size is None:
        return float(r[0])
    return r


@dataclass(frozen=True)
class SimulatedCloud:
    """``m`` points ``r* w*`` with ``w*`` taken from ``source`` by index."""

    idx: np.ndarray
    radii: np.ndarray
    k: float
    seed: int
    weights_used: np.ndarray
    source: ExceedanceSet = field(repr=False, compare=False)

    @property
    def m(self) -> int:
        return len(self.radii)

    @property
    def angles(self) -> np.ndarray:
        return self.source.w[self.idx]

    @property
    def points(self) -> np.ndarray:
        return self.radii[:, None] * self.angles

    def in_set(self, B) -> np.ndarray:
        """Membership of every point, via the per-angle critical scale."""
        crit = B.critical_scale(self.source.w)
        return self.radii > crit[self.idx]

    def summary(self) -> dict:
        lower = self.k * self.source.thresholds[self.idx]
        return {"m": self.m, "k": self.k, "seed": self.seed,
                "exceedance_fraction": float(np.mean(self.radii > lower)),
                "radius_mean": float(np.mean(self.radii)), "radius_max": float(np.max(self.radii)),
                "unique_angles": int(len(np.unique(self.idx))),
                "mean_weight": float(np.mean(self.weights_used))}


def simulate_cloud(model, exc: ExceedanceSet, k: float, m: int, rng) -> SimulatedCloud:
    """Importance-resampled angles with truncated-gamma radii above ``k r_tau``.

    Work is split into fixed-size chunks, each with its own spawned seed, so
    the cloud depends only on (seed, model, k, m).
    """
    p = _params(model)
    _check_k(k)
    ss = as_seed_sequence(rng)
    logw = log_importance_weights(exc.w, k, p, exc.thresholds)
    prob = _selection_probs(logw)
    g_all = p.gauge(exc.w)
    log_s_all = log_gamma_sf(k * exc.thresholds * g_all, p.shape)
    n_chunks = max(1, math.ceil(m / CHUNK))
    idx_parts, r_parts = [], []
    for i, child in enumerate(ss.spawn(n_chunks)):
        size = min(CHUNK, m - i * CHUNK)
        gen = np.random.default_rng(child)
        idx = gen.choice(len(prob), size=size, p=prob)
        if np.any(np.isneginf(log_s_all[idx])):
            raise SamplingError("truncated-gamma survival underflowed at k * r_tau(w)")
        u = gen.uniform(size=size)
        r = gamma_isf_log(np.log(u) + log_s_all[idx], p.shape) / g_all[idx]
        lower = k * exc.thresholds[idx]
        idx_parts.append(idx)
        r_parts.append(np.maximum(r, np.nextafter(lower, np.inf)))
    idx = np.concatenate(idx_parts)
    seed = int(ss.entropy) if isinstance(ss.entropy, int) else 0
    return SimulatedCloud(idx, np.concatenate(r_parts), float(k), seed, np.exp(logw[idx]), exc)


def select_k(non_exceedances, B, k_grid=None) -> float:
    """Largest grid value k such that no ``k z`` (z a non-exceedance) lies in B."""
    Z = np.atleast_2d(np.asarray(non_exceedances, dtype=float))
    if len(Z) == 0:
        raise DomainError("non-exceedance set is empty")
    grid = np.sort(np.asarray(DEFAULT_K_GRID if k_grid is None else k_grid, dtype=float))
    R = Z.sum(axis=1)
    ok = R > 0
    crit = np.min(B.critical_scale(Z[ok] / R[ok, None]) / R[ok]) if np.any(ok) else np.inf
    allowed = grid[grid <= crit]
    if len(allowed) == 0:
        warnings.warn("a non-exceedance enters B even at k = 1; extrapolation disabled", UserWarning, stacklevel=2)
        return 1.0
    return float(allowed[-1])


# --- temporal blocks ----------------------------------------------------------


@dataclass(frozen=True)
class AngularBlock:
    anchor_t: int
    angles: np.ndarray  # (block_len, d)
    weight: float


@dataclass(frozen=True)
class BlockSample:
    """Sampled anchors; block ``i`` covers rows ``anchor_rows[i] .. + block_len - 1``."""

    anchor_rows: np.ndarray
    weights: np.ndarray
    block_len: int
    k: float

    def blocks(self, exp_data) -> list[AngularBlock]:
        Z = np.asarray(exp_data)
        out = []
        for t, wgt in zip(self.anchor_rows, self.weights):
            blk = Z[t:t + self.block_len]
            out.append(AngularBlock(int(t), blk / blk.sum(axis=1, keepdims=True), float(wgt)))
        return out


def block_anchors(exc: ExceedanceSet, n_rows: int, block_len: int) -> np.ndarray:
    """Positions in ``exc`` whose block fits inside the series."""
    if block_len < 1:
        raise DomainError("block_len must be >= 1")
    return np.flatnonzero(exc.t + block_len - 1 < n_rows)


def sample_blocks(exp_data, exc: ExceedanceSet, k: float, m: int, rng, params, block_len: int = 4) -> BlockSample:
    """Anchor days with R' > 1 drawn proportionally to IW(anchor angle; k)."""
    n_rows = len(exp_data)
    pos = block_anchors(exc, n_rows, block_len)
    if len(pos) == 0:
        raise SamplingError("no exceedance day has a complete block after it")
    logw = log_importance_weights(exc.w[pos], k, _params(params), exc.thresholds[pos])
    pick = _weighted_indices(logw, m, _generator(rng))
    return BlockSample(exc.t[pos][pick], np.exp(logw[pick]), block_len, float(k))


@dataclass(frozen=True)
class BlockCloud:
    """Simulated blocks: observed block at ``anchor_rows`` scaled by ``scale``."""

    pos: np.ndarray  # index into the anchor list
    scale: np.ndarray
    k: float
    seed: int
    block_len: int
    anchor_rows: np.ndarray = field(repr=False)
    weights_used: np.ndarray = field(repr=False)

    @property
    def m(self) -> int:
        return len(self.scale)

    def materialise(self, exp_data, rows=slice(None)) -> np.ndarray:
        Z = np.asarray(exp_data)
        t = self.anchor_rows[self.pos[rows]]
        out = np.stack([Z[t + j] for j in range(self.block_len)], axis=1)
        return out * self.scale[rows, None, None]

    def in_set(self, B, exp_data) -> np.ndarray:
        crit = B.block_critical_scale(observed_blocks(exp_data, self.anchor_rows, self.block_len))
        return self.scale > crit[self.pos]


def observed_blocks(exp_data, rows, block_len: int) -> np.ndarray:
    Z = np.asarray(exp_data, dtype=float)
    return np.stack([Z[np.asarray(rows) + j] for j in range(block_len)], axis=1)


def simulate_blocks(model, exp_data, exc: ExceedanceSet, k: float, m: int, rng, block_len: int = 4) -> BlockCloud:
    """Blocks whose anchor radius is redrawn above ``k r_tau``; the whole
    observed block is rescaled by ``r* / r_anchor``."""
    p = _params(model)
    _check_k(k)
    ss = as_seed_sequence(rng)
    pos_all = block_anchors(exc, len(exp_data), block_len)
    if len(pos_all) == 0:
        raise SamplingError("no exceedance day has a complete block after it")
    sub = exc.subset(pos_all)
    logw = log_importance_weights(sub.w, k, p, sub.thresholds)
    prob = _selection_probs(logw)
    g_all = p.gauge(sub.w)
    log_s_all = log_gamma_sf(k * sub.thresholds * g_all, p.shape)
    n_chunks = max(1, math.ceil(m / CHUNK))
    pos_parts, s_parts = [], []
    for i, child in enumerate(ss.spawn(n_chunks)):
        size = min(CHUNK, m - i * CHUNK)
        gen = np.random.default_rng(child)
        pos = gen.choice(len(prob), size=size, p=prob)
        if np.any(np.isneginf(log_s_all[pos])):
            raise SamplingError("truncated-gamma survival underflowed at k * r_tau(w)")
        u = gen.uniform(size=size)
        r = gamma_isf_log(np.log(u) + log_s_all[pos], p.shape) / g_all[pos]
        r = np.maximum(r, np.nextafter(k * sub.thresholds[pos], np.inf))
        pos_parts.append(pos)
        s_parts.append(r / sub.r[pos])
    pos = np.concatenate(pos_parts)
    seed = int(ss.entropy) if isinstance(ss.entropy, int) else 0
    return BlockCloud(pos, np.concatenate(s_parts), float(k), seed, block_len, sub.t, np.exp(logw[pos]))
