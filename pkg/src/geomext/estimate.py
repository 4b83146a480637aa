"""Target extreme sets, extrapolated tail probabilities and expected counts."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from geomext import kernels
from geomext.errors import DomainError, FitError
from geomext.fit import ExceedanceSet, fit_truncated_gamma
from geomext.simulate import (
    as_seed_sequence,
    estimate_p_rprime_gt_k,
    select_k,
    simulate_blocks,
    simulate_cloud,
)

MIN_SIM = 10_000
MAX_ORACLE_D = 12

# Cross-run empirical means reported alongside estimates; never used as targets.
EMPIRICAL_REFERENCE = {"CTQ1": 0.24, "CTQ2": 0.20, "CTQ3": 0.24}


class SetKind(str, Enum):
    ALL_EXCEED = "AllExceed"
    AT_LEAST_M = "AtLeastM"
    CONSECUTIVE_RUN = "ConsecutiveRun"


@dataclass(frozen=True, eq=False)
class ExtremeSet:
    """Event region on the exponential scale.

    AllExceed: every site above its threshold. AtLeastM: at least ``m`` sites.
    ConsecutiveRun: at least ``m`` sites whose minimum over some window of
    ``run_len`` consecutive days is above threshold.
    """

    kind: SetKind | str
    q: np.ndarray
    m: int | None = None
    run_len: int = 1

    def __post_init__(self):
        kind = SetKind(self.kind)
        q = np.array(self.q, dtype=float).ravel()
        q.setflags(write=False)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "q", q)
        d = len(q)
        m = d if kind is SetKind.ALL_EXCEED else self.m
        if m is None:
            raise DomainError(f"{kind.value} needs m")
        object.__setattr__(self, "m", int(m))
        if kind is not SetKind.CONSECUTIVE_RUN:
            object.__setattr__(self, "run_len", 1)
        if not np.all(q > 0):
            raise DomainError("thresholds must be positive")
        if not 1 <= self.m <= d:
            raise DomainError(f"m must lie in [1, {d}], got {self.m}")
        if self.run_len < 1:
            raise DomainError("run_len must be >= 1")

    def __eq__(self, other) -> bool:
        if not isinstance(other, ExtremeSet):
            return NotImplemented
        return (self.kind, self.m, self.run_len) == (other.kind, other.m, other.run_len) and np.array_equal(
            self.q, other.q)

    def __hash__(self) -> int:
        return hash((self.kind, self.m, self.run_len, self.q.tobytes()))

    @property
    def d(self) -> int:
        return len(self.q)

    @classmethod
    def all_exceed(cls, q) -> ExtremeSet:
        return cls(SetKind.ALL_EXCEED, q)

    @classmethod
    def at_least(cls, q, m: int) -> ExtremeSet:
        return cls(SetKind.AT_LEAST_M, q, m)

    @classmethod
    def consecutive(cls, q, m: int, run_len: int = 2) -> ExtremeSet:
        return cls(SetKind.CONSECUTIVE_RUN, q, m, run_len)

    def critical_scale(self, Y) -> np.ndarray:
        """Per row of ``Y``: c such that ``s Y`` is in the set iff s > c.

        For ConsecutiveRun the single-vector (AtLeastM) scale is returned; a
        vector outside it cannot complete a run.
        """
        return kernels.critical_scale(Y, self.q, self.m)

    def block_critical_scale(self, blocks) -> np.ndarray:
        blocks = np.asarray(blocks, dtype=float)
        if blocks.ndim != 3 or blocks.shape[2] != self.d:
            raise DomainError("blocks must have shape (n, block_len, d)")
        if blocks.shape[1] < self.run_len:
            raise DomainError(f"blocks need at least {self.run_len} days")
        return kernels.window_critical_scale(blocks, self.q, self.m, self.run_len)

    def contains(self, x) -> np.ndarray | bool:
        return membership(x, self)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "q": self.q.tolist(), "m": self.m, "run_len": self.run_len}

    @classmethod
    def from_dict(cls, d: dict) -> ExtremeSet:
        return cls(d["kind"], d["q"], d.get("m"), int(d.get("run_len", 1)))


def membership(x, B: ExtremeSet):
    """Whether a day-vector (or, for ConsecutiveRun, a block of day-vectors) lies in B.

    Accepts a batch: (n, d) vectors or (n, L, d) blocks.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != B.d:
        raise DomainError(f"dimension {x.shape[-1]} does not match the set's {B.d} sites")
    if B.kind is SetKind.CONSECUTIVE_RUN:
        if x.ndim < 2 or x.shape[-2] < B.run_len:
            raise DomainError(f"ConsecutiveRun needs a block of at least {B.run_len} day-vectors")
        blocks = x[None] if x.ndim == 2 else x
        L = blocks.shape[1]
        hit = np.zeros(len(blocks), dtype=bool)
        for s in range(L - B.run_len + 1):
            y = blocks[:, s:s + B.run_len].min(axis=1)
            hit |= np.count_nonzero(y > B.q, axis=1) >= B.m
        return bool(hit[0]) if x.ndim == 2 else hit
    if x.ndim > 2:
        raise DomainError("expected a vector or a matrix of vectors")
    res = np.count_nonzero(np.atleast_2d(x) > B.q, axis=1) >= B.m
    return bool(res[0]) if x.ndim == 1 else res


@dataclass(frozen=True)
class TailEstimate:
    prob: float
    frac_in_b: float
    p_k: float
    p_exceed: float
    n_in_b: int
    m_sim: int
    k: float

    @property
    def mc_se(self) -> float:
        """Monte-Carlo standard error from the in-set fraction alone."""
        f = self.frac_in_b
        return math.sqrt(f * (1 - f) / self.m_sim) * self.p_k * self.p_exceed

    def to_dict(self) -> dict:
        return {"prob": self.prob, "frac_in_b": self.frac_in_b, "p_k": self.p_k, "p_exceed": self.p_exceed,
                "n_in_b": self.n_in_b, "m_sim": self.m_sim, "k": self.k, "mc_se": self.mc_se}


def tail_probability(model, exc: ExceedanceSet, B: ExtremeSet, k: float, m_sim: int, rng,
                     exp_data=None, block_len: int = 4) -> TailEstimate:
    """P(Z in B) = P(Z in B | R' > k) P(R' > k | R' > 1) P(R' > 1).

    ConsecutiveRun sets are evaluated on simulated temporal blocks and need
    the exponential-scale data ``exp_data`` the exceedances came from.
    """
    if m_sim < MIN_SIM:
        raise DomainError(f"m_sim must be at least {MIN_SIM}")
    if exc.d != B.d:
        raise DomainError("set and model dimensions differ")
    if B.kind is SetKind.CONSECUTIVE_RUN:
        if exp_data is None:
            raise DomainError("ConsecutiveRun sets need the exponential-scale data for block sampling")
        cloud = simulate_blocks(model, exp_data, exc, k, m_sim, rng, block_len=max(block_len, B.run_len))
        inside = cloud.in_set(B, exp_data)
    else:
        cloud = simulate_cloud(model, exc, k, m_sim, rng)
        inside = cloud.in_set(B)
    n_in = int(np.count_nonzero(inside))
    frac = n_in / m_sim
    p_k = estimate_p_rprime_gt_k(exc, k, model.params if hasattr(model, "params") else model)
    p_exc = exc.n / exc.n_total
    if n_in == 0:
        warnings.warn("no simulated point fell in B; increase k or m_sim", UserWarning, stacklevel=2)
    return TailEstimate(frac * p_k * p_exc, frac, p_k, p_exc, n_in, int(m_sim), float(k))


def empirical_probability(exp_data, B: ExtremeSet) -> float:
    """Direct indicator count over the sample (day-pairs for ConsecutiveRun)."""
    Z = np.asarray(exp_data, dtype=float)
    if B.kind is SetKind.CONSECUTIVE_RUN:
        L = B.run_len
        blocks = np.stack([Z[j:len(Z) - L + 1 + j] for j in range(L)], axis=1)
        return float(np.mean(membership(blocks, B)))
    return float(np.mean(membership(Z, B)))


def inclusion_exclusion_oracle(joint_sample, q, m: int) -> float:
    """P(at least m of d components exceed q) from alternating subset sums.

    sum_{r=m}^{d} (-1)^(r-m) C(r-1, m-1) sum_{|J|=r} P(Z_J > q_J), with every
    joint probability counted on the same sample. Exponential in d.
    """
    Z = np.asarray(joint_sample, dtype=float)
    q = np.asarray(q, dtype=float)
    n, d = Z.shape
    if d > MAX_ORACLE_D:
        raise DomainError(f"inclusion-exclusion over 2^{d} subsets is infeasible; limited to d <= {MAX_ORACLE_D}")
    if not 1 <= m <= d:
        raise DomainError(f"m must lie in [1, {d}]")
    bits = (Z > q).astype(np.int64) @ (1 << np.arange(d, dtype=np.int64))
    # S[J] = number of rows whose exceedance set contains J (superset zeta transform)
    S = np.bincount(bits, minlength=1 << d).astype(np.int64)
    for i in range(d):
        step = 1 << i
        S = S.reshape(-1, 2 * step)
        S[:, :step] += S[:, step:]
        S = S.reshape(-1)
    pop = np.array([bin(j).count("1") for j in range(1 << d)])
    total = 0
    for r in range(m, d + 1):
        coef = (-1) ** (r - m) * math.comb(r - 1, m - 1)
        total += coef * int(S[pop == r].sum())
    return total / n


def direct_count_probability(joint_sample, q, m: int) -> float:
    Z = np.asarray(joint_sample, dtype=float)
    return float(np.count_nonzero(np.count_nonzero(Z > np.asarray(q), axis=1) >= m)) / len(Z)


def ctq_frequency(prob: float, n_obs: int) -> float:
    if not 0 <= prob <= 1:
        raise DomainError(f"probability {prob} outside [0, 1]")
    if n_obs < 1:
        raise DomainError("n_obs must be >= 1")
    return prob * n_obs


def n_observations(B: ExtremeSet, n_days: int) -> int:
    """Days for single-day events; overlapping windows for runs."""
    return n_days - (B.run_len - 1)


@dataclass(frozen=True)
class BootstrapSummary:
    mean: float
    median: float
    ci: tuple[float, float]
    values: np.ndarray = field(repr=False)
    failures: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "median": self.median, "ci": list(self.ci),
                "n_reps": int(len(self.values)), "n_failed": len(self.failures)}


def bootstrap_ci(pipeline_closure: Callable, data, n_reps: int = 500, level: float = 0.95, rng=0,
                 max_failure_rate: float = 0.05) -> BootstrapSummary:
    """Percentile bootstrap of ``pipeline_closure(resampled_data, seed)``.

    ``data`` is indexable along its first axis (an array, list, or anything
    with a ``subset`` method such as an exceedance set). Each replicate gets
    its own spawned seed.
    """
    if n_reps < 100:
        raise DomainError("n_reps must be at least 100")
    if not 0 < level < 1:
        raise DomainError("level must lie in (0, 1)")
    ss = as_seed_sequence(rng)
    n = data.n if hasattr(data, "subset") else len(data)
    values, failures = [], []
    for i, child in enumerate(ss.spawn(n_reps)):
        gen = np.random.default_rng(child)
        idx = gen.integers(0, n, size=n)
        sample = data.subset(idx) if hasattr(data, "subset") else np.asarray(data)[idx]
        try:
            v = float(pipeline_closure(sample, gen))
        except Exception as exc:  # replicate-level failures are tallied, not fatal
            failures.append((i, repr(exc)))
            continue
        if not math.isfinite(v):
            failures.append((i, f"non-finite value {v}"))
            continue
        values.append(v)
    if len(failures) > max_failure_rate * n_reps:
        raise FitError(f"{len(failures)} of {n_reps} bootstrap replicates failed", diagnostics=failures)
    vals = np.array(values)
    alpha = 1 - level
    lo, hi = np.quantile(vals, [alpha / 2, 1 - alpha / 2])
    return BootstrapSummary(float(vals.mean()), float(np.median(vals)), (float(lo), float(hi)), vals, failures)


@dataclass(frozen=True)
class CtqEstimate:
    point: float
    bootstrap_mean: float
    bootstrap_median: float
    ci: tuple[float, float]
    k_used: float
    n_obs: int
    prob: float = math.nan
    tail: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {"point": self.point, "bootstrap_mean": self.bootstrap_mean,
                "bootstrap_median": self.bootstrap_median, "ci": list(self.ci), "k_used": self.k_used,
                "n_obs": self.n_obs, "prob": self.prob, "tail": self.tail}


def estimate_ctq(model, exp_data, exc: ExceedanceSet, non_exceedance_mask, B: ExtremeSet, m_sim: int, rng,
                 n_reps: int = 500, m_sim_boot: int | None = None, block_len: int = 4, k_grid=None,
                 level: float = 0.95, refit: bool = False) -> CtqEstimate:
    """Expected count of B-events per run with a bootstrap over exceedances
    (anchors for run events). The fitted model is held fixed unless
    ``refit`` is set, in which case every replicate refits the
    truncated-gamma stage from the fitted values (slow)."""
    Z = np.asarray(exp_data, dtype=float)
    ss = as_seed_sequence(rng)
    point_seed, boot_seed = ss.spawn(2)
    k = select_k(Z[np.asarray(non_exceedance_mask)], B, k_grid)
    n_obs = n_observations(B, len(Z))
    est = tail_probability(model, exc, B, k, m_sim, point_seed, exp_data=Z, block_len=block_len)
    mb = m_sim if m_sim_boot is None else m_sim_boot

    def replicate(sub: ExceedanceSet, gen) -> float:
        m_rep = fit_truncated_gamma(sub, getattr(model, "params", model), n_multistart=0) if refit else model
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            t = tail_probability(m_rep, sub, B, k, mb, gen, exp_data=Z, block_len=block_len)
        return ctq_frequency(t.prob, n_obs)

    # resampled exceedances double as resampled anchors for run events
    boot = bootstrap_ci(replicate, exc, n_reps=n_reps, level=level, rng=boot_seed)
    return CtqEstimate(ctq_frequency(est.prob, n_obs), boot.mean, boot.median, boot.ci, k, n_obs, est.prob,
                       est.to_dict())

