"""Estimators for Σ², Φ(0), σ̃², σ̂² and local-limit profiles.

Every estimator keeps sufficient statistics per trajectory group
(trajectory index mod batch count) so that chunks merge associatively and
standard errors come from batch means.
"""
import math
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .core import (
    BATCH_COUNT,
    CHUNK_SIZE,
    LAG_CAP,
    RETURN_CAP,
    DegenerateMatrix,
    NotCentered,
    WindowTooSmall,
)
from .dynamics import DynamicsStrategy, Walk, run_lanes, induced_excursions
from .utils.stats import group_ids, gaussian_density

# ==========================================
# Sufficient Statistics
# ==========================================
class MomentStatistics:
    """Σx and Σx² per group for values of a fixed trailing shape."""

    def __init__(self, shape=(), batches: int = BATCH_COUNT):
        self.batches = batches
        self.count = np.zeros(batches)
        self.s1 = np.zeros((batches,) + tuple(shape))
        self.s2 = np.zeros((batches,) + tuple(shape))

    def add(self, values: np.ndarray, groups: np.ndarray):
        values = np.asarray(values, dtype=float)
        np.add.at(self.count, groups, 1.0)
        np.add.at(self.s1, groups, values)
        np.add.at(self.s2, groups, values ** 2)

    def merge(self, other: "MomentStatistics") -> "MomentStatistics":
        out = MomentStatistics(self.s1.shape[1:], self.batches)
        out.count = self.count + other.count
        out.s1 = self.s1 + other.s1
        out.s2 = self.s2 + other.s2
        return out

    @property
    def n(self) -> int:
        return int(self.count.sum())

    def mean(self) -> np.ndarray:
        return self.s1.sum(axis=0) / max(self.count.sum(), 1.0)

    def group_means(self) -> np.ndarray:
        live = self.count > 0
        shape = (-1,) + (1,) * (self.s1.ndim - 1)
        return self.s1[live] / self.count[live].reshape(shape)

    def stderr(self) -> np.ndarray:
        return _spread(self.group_means())


def _spread(group_values: np.ndarray) -> np.ndarray:
    g = len(group_values)
    if g < 2:
        return np.full(np.shape(group_values)[1:], np.nan)
    return group_values.std(axis=0, ddof=1) / math.sqrt(g)


def lagged_products(x: np.ndarray, y: np.ndarray, max_lag: int) -> np.ndarray:
    """Σ_t x[:, t]·y[:, t+k] per row for k = 0..max_lag, by FFT."""
    n = x.shape[1]
    size = 1 << int(math.ceil(math.log2(max(2 * n, 2))))
    X = np.fft.rfft(x, size, axis=1)
    Y = np.fft.rfft(y, size, axis=1)
    return np.fft.irfft(np.conj(X) * Y, size, axis=1)[:, :max_lag + 1]


class LagStatistics:
    """Per-group lagged cross sums of the step F, and Σ S_n⊗S_n at checkpoints."""

    def __init__(self, max_lag: int, checkpoints: Sequence[int] = (), batches: int = BATCH_COUNT):
        self.max_lag = max_lag
        self.checkpoints = [int(c) for c in checkpoints]
        self.batches = batches
        self.sums = np.zeros((batches, max_lag + 1, 2, 2))
        self.pairs = np.zeros((batches, max_lag + 1))
        self.outer = MomentStatistics((len(self.checkpoints), 2, 2), batches)
        self.trajectories = 0
        self.length = 0

    def add(self, F: np.ndarray, groups: np.ndarray):
        """F is (lanes, n, 2) integer steps."""
        F = np.asarray(F, dtype=float)
        lanes, n, _ = F.shape
        K = min(self.max_lag, n - 1)
        for a in range(2):
            for b in range(2):
                prod = np.rint(lagged_products(F[:, :, a], F[:, :, b], K))
                np.add.at(self.sums[:, :K + 1, a, b], groups, prod)
        counts = np.maximum(n - np.arange(K + 1), 0).astype(float)
        np.add.at(self.pairs[:, :K + 1], groups, np.broadcast_to(counts, (lanes, K + 1)))
        if self.checkpoints:
            S = np.cumsum(F, axis=1)
            at = S[:, [c - 1 for c in self.checkpoints], :]
            self.outer.add(at[:, :, :, None] * at[:, :, None, :], groups)
        self.trajectories += lanes
        self.length = max(self.length, n)

    def merge(self, other: "LagStatistics") -> "LagStatistics":
        out = LagStatistics(self.max_lag, self.checkpoints, self.batches)
        out.sums = self.sums + other.sums
        out.pairs = self.pairs + other.pairs
        out.outer = self.outer.merge(other.outer)
        out.trajectories = self.trajectories + other.trajectories
        out.length = max(self.length, other.length)
        return out

    def lag_terms(self) -> np.ndarray:
        return self.sums.sum(axis=0) / np.maximum(self.pairs.sum(axis=0), 1.0)[:, None, None]

    def group_lag_terms(self) -> np.ndarray:
        live = self.pairs[:, 0] > 0
        return self.sums[live] / np.maximum(self.pairs[live], 1.0)[:, :, None, None]


def collect_steps(dynamics: DynamicsStrategy, trajectories: int, n: int, seed: int,
                  max_lag: int = LAG_CAP, checkpoints: Sequence[int] = (),
                  batches: int = BATCH_COUNT, pool=None, law: str = "mu_delta0",
                  retry_budget: int = 3, burn_in: int = 0) -> LagStatistics:
    """Runs `trajectories` walks of n steps and folds their F sequences into LagStatistics."""
    chunk = max(1, min(CHUNK_SIZE, (1 << 22) // max(n, 1)))
    starts = list(range(0, trajectories, chunk))

    def work_chunk(lo):
        idx = np.arange(lo, min(lo + chunk, trajectories))

        def run(walk: Walk):
            for _ in range(burn_in):
                walk.step()
            F = np.zeros((len(walk), n, 2), dtype=np.int32)
            for t in range(n):
                F[:, t] = walk.step().F
            return {"F": F}

        out, _ = run_lanes(run, dynamics, idx, seed, law, retry_budget)
        stats = LagStatistics(max_lag, checkpoints, batches)
        stats.add(out["F"], group_ids(idx, batches))
        logging.debug(f"[Estimators] step chunk {lo // chunk} done ({len(idx)} trajectories)")
        return stats

    parts = pool.map(work_chunk, starts) if pool is not None else [work_chunk(lo) for lo in starts]
    total = LagStatistics(max_lag, checkpoints, batches)
    for part in parts:
        total = total.merge(part)
    return total

# ==========================================
# Diffusion Matrix
# ==========================================
@dataclass
class DiffusionMatrix:
    matrix: np.ndarray
    stderr: np.ndarray
    window: int
    lags: np.ndarray
    lag_stderr: np.ndarray
    noise_floor: float
    alternative: List[Dict[str, Any]] = field(default_factory=list)
    reversal: Dict[str, Any] = field(default_factory=dict)
    trajectories: int = 0

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix).min())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "matrix": self.matrix.tolist(),
            "stderr": self.stderr.tolist(),
            "window": self.window,
            "noise_floor": self.noise_floor,
            "min_eigenvalue": self.min_eigenvalue,
            "trajectories": self.trajectories,
            "lags": [{"k": k, "C": self.lags[k].tolist(), "stderr": self.lag_stderr[k].tolist()}
                     for k in range(len(self.lags))],
            "alternative": self.alternative,
            "reversal": self.reversal,
        }


def select_window(terms: np.ndarray, stderr: np.ndarray, cap: int = LAG_CAP, run: int = 3) -> int:
    """Smallest K such that lags K+1..K+run all sit within 3 stderr of zero."""
    flat_t = np.abs(terms.reshape(len(terms), -1))
    flat_s = np.nan_to_num(stderr.reshape(len(stderr), -1), nan=0.0)
    quiet = np.all(flat_t <= 3.0 * flat_s, axis=1)
    last = min(cap, len(terms) - run)
    for k in range(1, last + 1):
        if quiet[k:k + run].all():
            return k - 1
    raise WindowTooSmall(f"lag terms stay above the noise floor up to lag {last}", cap=cap)


def _symmetrized(lags: np.ndarray, K: int) -> np.ndarray:
    total = lags[0].copy()
    for k in range(1, K + 1):
        total += lags[k] + lags[k].T
    return total


def diffusion_matrix(stats: LagStatistics, K: Optional[int] = None, cap: int = LAG_CAP) -> DiffusionMatrix:
    """Σ² = C_0 + Σ_{k=1..K}(C_k + C_kᵀ), with E[S_n⊗S_n]/n alongside."""
    lags = stats.lag_terms()
    group = stats.group_lag_terms()
    lag_se = _spread(group)
    if K is None:
        K = select_window(lags, lag_se, cap)
        logging.info(f"[Estimators] diffusion window K={K}")
    elif K > 0:
        last = np.abs(lags[K]) > 3.0 * np.nan_to_num(lag_se[K], nan=0.0)
        if last.any():
            raise WindowTooSmall(f"lag {K} term above 3 stderr", window=K)
    matrix = _symmetrized(lags, K)
    per_group = np.array([_symmetrized(g, K) for g in group])
    se = _spread(per_group)
    floor = float(np.nanmax(lag_se[min(K + 1, len(lag_se) - 1)]))

    alternative = []
    if stats.checkpoints:
        outer_mean = stats.outer.mean()
        outer_se = stats.outer.stderr()
        for j, n in enumerate(stats.checkpoints):
            alternative.append({"n": n, "matrix": (outer_mean[j] / n).tolist(),
                                "stderr": (outer_se[j] / n).tolist()})

    antisym = np.array([(g - np.swapaxes(g, -1, -2)) / 2.0 for g in group])
    anti_mean = (lags - np.swapaxes(lags, -1, -2)) / 2.0
    anti_se = _spread(antisym) if len(antisym) >= 2 else np.full(anti_mean.shape, np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(anti_se > 0, np.abs(anti_mean) / anti_se, 0.0)
    reversal = {"max_z": float(np.nanmax(z[1:K + 2])) if K + 2 <= len(z) and K >= 0 else 0.0,
                "lags_checked": int(min(K + 1, len(z) - 1))}

    if float(np.linalg.eigvalsh(matrix).min()) < -3.0 * float(np.nanmax(se)):
        logging.warning("[Estimators] Σ² has an eigenvalue below −3 stderr")
    return DiffusionMatrix(matrix, se, K, lags[:K + 4], lag_se[:K + 4], floor,
                           alternative, reversal, stats.trajectories)


@dataclass
class Phi0Estimate:
    value: float
    stderr: float

    def to_dict(self) -> Dict[str, float]:
        return {"value": self.value, "stderr": self.stderr}


def phi0(sigma) -> Phi0Estimate:
    """Φ(0) = 1/(2π√det Σ²), first-order error from the entry stderrs."""
    if isinstance(sigma, DiffusionMatrix):
        m, se = sigma.matrix, np.nan_to_num(sigma.stderr, nan=0.0)
    else:
        m, se = np.asarray(sigma, dtype=float), np.zeros((2, 2))
    a, b, d = float(m[0, 0]), float(0.5 * (m[0, 1] + m[1, 0])), float(m[1, 1])
    det = a * d - b * b
    if det <= 0.0:
        raise DegenerateMatrix(f"det Σ² = {det:.3e}")
    value = 1.0 / (2.0 * math.pi * math.sqrt(det))
    var_det = (d * se[0, 0]) ** 2 + (a * se[1, 1]) ** 2 + (2.0 * b * se[0, 1]) ** 2
    return Phi0Estimate(value, value / (2.0 * det) * math.sqrt(var_det))

# ==========================================
# Variances of Observables
# ==========================================
@dataclass
class VarianceReport:
    value: float
    stderr: float
    window: int
    terms: List[float]
    term_stderr: List[float]
    tail: float
    cesaro: float
    cesaro_stderr: float
    count: int
    method: str
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        data = {"value": self.value, "stderr": self.stderr, "window": self.window,
                "tail": self.tail, "cesaro": self.cesaro, "cesaro_stderr": self.cesaro_stderr,
                "count": self.count, "method": self.method,
                "terms": [{"k": k, "value": t, "stderr": s}
                          for k, (t, s) in enumerate(zip(self.terms, self.term_stderr))]}
        data.update(self.extra)
        return data


def _window_sums(group_terms: np.ndarray, K: int):
    """Plain and Cesàro-weighted t_0 + 2Σ_{k≤K} t_k per group."""
    k = np.arange(1, K + 1)
    plain = group_terms[:, 0] + 2.0 * group_terms[:, 1:K + 1].sum(axis=1)
    weights = 1.0 - k / (K + 1.0)
    cesaro = group_terms[:, 0] + 2.0 * (group_terms[:, 1:K + 1] * weights).sum(axis=1)
    return plain, cesaro


def _variance_report(terms, group_terms, window, cap, count, method, run=3, extra=None) -> VarianceReport:
    term_se = _spread(group_terms)
    if window is None:
        window = select_window(terms, term_se, cap, run)
        logging.info(f"[Estimators] {method} window K={window}")
    plain_g, ces_g = _window_sums(group_terms, window)
    plain = float(terms[0] + 2.0 * terms[1:window + 1].sum())
    k = np.arange(1, window + 1)
    ces = float(terms[0] + 2.0 * (terms[1:window + 1] * (1.0 - k / (window + 1.0))).sum())
    tail = float(2.0 * np.abs(terms[window + 1:window + 1 + run]).sum())
    return VarianceReport(plain, float(_spread(plain_g)), window, terms.tolist(),
                          np.nan_to_num(term_se, nan=0.0).tolist(), tail, ces, float(_spread(ces_g)),
                          count, method, extra or {})


def green_kubo_variance(f, dynamics: DynamicsStrategy, trajectories: int, seed: int,
                        K: Optional[int] = None, cap: int = LAG_CAP, batches: int = BATCH_COUNT,
                        centering_z: float = 2.0, pool=None, retry_budget: int = 3) -> VarianceReport:
    """σ̃²(f) = Σ_a E_μ[f(·,a)²] + 2Σ_{k≥1} Σ_a E_μ[f(·,a)·f∘T̃^k(·,a)] over the support of f."""
    cells = f.support()
    if cells is None:
        raise NotCentered(f"'{f.name}' has no finite support", observable=f.name)
    horizon = (K if K is not None else cap) + 3
    starts = list(range(0, trajectories, CHUNK_SIZE))

    def work_chunk(lo):
        idx = np.arange(lo, min(lo + CHUNK_SIZE, trajectories))

        def run(walk: Walk):
            lanes = len(walk)
            grid = np.broadcast_to(cells[None, :, :], (lanes, len(cells), 2))
            f0 = f.evaluate_cells(walk.batch, grid)
            z = np.zeros((lanes, horizon + 1))
            z[:, 0] = (f0 * f0).sum(axis=1)
            shift = np.zeros((lanes, 2), dtype=np.int64)
            for k in range(1, horizon + 1):
                shift += walk.step().F
                fk = f.evaluate_cells(walk.batch, grid + shift[:, None, :])
                z[:, k] = (f0 * fk).sum(axis=1)
            return {"z": z, "integral": f0.sum(axis=1)}

        out, discarded = run_lanes(run, dynamics, idx, seed, "mu_delta0", retry_budget)
        groups = group_ids(idx, batches)
        lag = MomentStatistics((horizon + 1,), batches)
        lag.add(out["z"], groups)
        mass = MomentStatistics((), batches)
        mass.add(out["integral"], groups)
        return lag, mass, discarded

    parts = pool.map(work_chunk, starts) if pool is not None else [work_chunk(lo) for lo in starts]
    lag = MomentStatistics((horizon + 1,), batches)
    mass = MomentStatistics((), batches)
    discarded = 0
    for part in parts:
        lag, mass, discarded = lag.merge(part[0]), mass.merge(part[1]), discarded + part[2]

    if f.exact_integral is not None:
        I, se = float(f.exact_integral), float(f.integral_stderr)
    else:
        I, se = float(mass.mean()), float(mass.stderr())
    if abs(I) > centering_z * se and abs(I) > 1e-12:
        raise NotCentered(f"'{f.name}': integral {I:.4g} exceeds {centering_z} stderr ({se:.3g})",
                          observable=f.name, integral=I, stderr=se)
    return _variance_report(lag.mean(), lag.group_means(), K, cap, lag.n, "green_kubo",
                            extra={"observable": f.name, "integral": I, "integral_stderr": se,
                                   "discarded": discarded})


def _pieces(segments: List[slice], batches: int) -> List[slice]:
    if len(segments) >= batches or not segments:
        return segments
    parts = int(math.ceil(batches / len(segments)))
    out = []
    for seg in segments:
        for chunk in np.array_split(np.arange(seg.start, seg.stop), parts):
            if len(chunk):
                out.append(slice(int(chunk[0]), int(chunk[-1]) + 1))
    return out


def excursion_variance(values: np.ndarray, segments: List[slice], M: int,
                       batches: int = BATCH_COUNT) -> VarianceReport:
    """∫G² + 2Σ_{n≤M} ∫G·G∘T̂ⁿ from consecutive excursion sums, plain and Cesàro."""
    values = np.asarray(values, dtype=float)
    pieces = _pieces(segments, batches)
    sums = np.zeros((batches, M + 1))
    pairs = np.zeros((batches, M + 1))
    for p, seg in enumerate(pieces):
        g = values[seg][None, :]
        K = min(M, g.shape[1] - 1)
        prod = lagged_products(g, g, K)[0]
        sums[p % batches, :K + 1] += prod
        pairs[p % batches, :K + 1] += np.maximum(g.shape[1] - np.arange(K + 1), 0)
    total = sums.sum(axis=0) / np.maximum(pairs.sum(axis=0), 1.0)
    live = pairs[:, 0] > 0
    group_terms = sums[live] / np.maximum(pairs[live], 1.0)
    k = np.arange(1, M + 1)
    plain_g = group_terms[:, 0] + 2.0 * group_terms[:, 1:].sum(axis=1)
    ces_g = group_terms[:, 0] + 2.0 * (group_terms[:, 1:] * (1.0 - k / (M + 1.0))).sum(axis=1)
    plain = float(total[0] + 2.0 * total[1:].sum())
    ces = float(total[0] + 2.0 * (total[1:] * (1.0 - k / (M + 1.0))).sum())
    return VarianceReport(plain, float(_spread(plain_g)), M, total.tolist(),
                          np.nan_to_num(_spread(group_terms), nan=0.0).tolist(),
                          float(2.0 * abs(total[-1])), ces, float(_spread(ces_g)),
                          len(values), "induced")


def induced_variance(observables: Dict[str, Any], dynamics: DynamicsStrategy, excursions: int,
                     seed: int, M: int = 20, walkers: int = 1024, cap: int = RETURN_CAP,
                     max_steps: Optional[int] = None, max_cap_rate: float = 0.5,
                     batches: int = BATCH_COUNT) -> Dict[str, VarianceReport]:
    """σ̂² for each registered observable from one shared run of excursions."""
    walk = Walk(dynamics, np.arange(walkers), seed)
    sample = induced_excursions(walk, observables, excursions, cap, max_steps, max_cap_rate)
    segments = sample.segments()
    out = {}
    for name in observables:
        rep = excursion_variance(sample.sums[name], segments, M, batches)
        rep.extra.update({"observable": name, "excursions": sample.count, "capped": sample.capped,
                          "cap_rate": sample.cap_rate, "failed_walkers": sample.failed,
                          "heavy_tail_caution": True})
        out[name] = rep
    logging.info(f"[Estimators] induced run: {sample.count} excursions, {sample.capped} capped")
    return out

# ==========================================
# Local Limit Profile
# ==========================================
@dataclass
class LocalLimitProfile:
    rows: List[Dict[str, float]]
    max_error: Dict[int, float]
    total_mass: Dict[int, float]
    trajectories: int

    def to_dict(self) -> Dict[str, Any]:
        return {"max_error": {str(k): v for k, v in self.max_error.items()},
                "total_mass": {str(k): v for k, v in self.total_mass.items()},
                "trajectories": self.trajectories, "rows": self.rows}


def local_limit_profile(dynamics: DynamicsStrategy, ells: Sequence[int], sites: Sequence, sigma_sq,
                        trajectories: int, seed: int, pool=None, retry_budget: int = 3) -> LocalLimitProfile:
    """ℓ·p̂(ℓ, a) against Φ(a/√ℓ) for an ensemble started from μ ⊗ δ₀."""
    ells = sorted(int(e) for e in ells)
    sites = np.asarray(sites, dtype=np.int64).reshape(-1, 2)
    sigma_sq = np.asarray(getattr(sigma_sq, "matrix", sigma_sq), dtype=float)
    starts = list(range(0, trajectories, CHUNK_SIZE))

    def work_chunk(lo):
        idx = np.arange(lo, min(lo + CHUNK_SIZE, trajectories))

        def run(walk: Walk):
            cells = np.zeros((len(walk), len(ells), 2), dtype=np.int64)
            t = 0
            for j, ell in enumerate(ells):
                while t < ell:
                    walk.step()
                    t += 1
                cells[:, j] = walk.cells
            return {"cells": cells}

        out, _ = run_lanes(run, dynamics, idx, seed, "mu_delta0", retry_budget)
        return out["cells"]

    parts = pool.map(work_chunk, starts) if pool is not None else [work_chunk(lo) for lo in starts]
    cells = np.concatenate(parts, axis=0)
    N = len(cells)
    rows, max_error, total = [], {}, {}
    for j, ell in enumerate(ells):
        uniq, counts = np.unique(cells[:, j], axis=0, return_counts=True)
        total[ell] = float(counts.sum() / N)
        lookup = {(int(a[0]), int(a[1])): c for a, c in zip(uniq, counts)}
        worst = 0.0
        for a in sites:
            p = lookup.get((int(a[0]), int(a[1])), 0) / N
            pred = float(gaussian_density(sigma_sq, a / math.sqrt(ell)))
            se = math.sqrt(p * (1.0 - p) / N)
            rows.append({"ell": ell, "a_x": int(a[0]), "a_y": int(a[1]), "empirical": ell * p,
                         "predicted": pred, "stderr": ell * se})
            worst = max(worst, abs(ell * p - pred))
        max_error[ell] = worst
    return LocalLimitProfile(rows, max_error, total, N)
