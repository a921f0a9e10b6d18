"""Distributional checks of the ln n limit laws on simulated ensembles.

An EnsembleRun holds, per trajectory, the Birkhoff sums of every registered
observable at the times n·s for n in n_values and s in the grid. The law
tests below are pure post-processing of those tables.
"""
import math
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy import stats

from .core import (
    BATCH_COUNT,
    CHUNK_SIZE,
    GL_ORDER,
    ConfigInvalid,
    InsufficientBins,
    VarianceDegenerate,
)
from .dynamics import DynamicsStrategy, Walk, run_lanes, birkhoff_sums, flow_sums
from .utils.stats import batch_stderr, cdf_table, moment_table, qq_table

DEFAULT_GRID = (1.0, 1.25, 1.5, 1.75, 2.0)
LAPLACE = stats.laplace(scale=1.0 / math.sqrt(2.0))

# ==========================================
# Ensembles
# ==========================================
@dataclass
class EnsembleRun:
    seed: int
    trajectories: int
    n_values: List[int]
    grid: List[float]
    clock: str
    stats: Dict[str, np.ndarray]
    discarded: int = 0

    def at(self, name: str, n: int, s: Optional[float] = None) -> np.ndarray:
        """Per-trajectory values of `name` at time n·s (s defaults to the first grid point)."""
        if name not in self.stats:
            raise ConfigInvalid(f"limit_tests: observable '{name}' was not recorded")
        try:
            i = self.n_values.index(int(n))
        except ValueError:
            raise ConfigInvalid(f"limit_tests: n={n} is not in the ensemble") from None
        j = 0 if s is None else int(np.argmin(np.abs(np.asarray(self.grid) - s)))
        return self.stats[name][:, i, j]

    def at_time(self, name: str, t: float) -> np.ndarray:
        for i, n in enumerate(self.n_values):
            for j, s in enumerate(self.grid):
                if math.isclose(n * s, t):
                    return self.stats[name][:, i, j]
        raise ConfigInvalid(f"limit_tests: time {t} is not on the ensemble grid")

    def window(self, name: str, n: int) -> np.ndarray:
        return self.stats[name][:, self.n_values.index(int(n)), :]

    def summary(self) -> Dict[str, Any]:
        return {"seed": self.seed, "trajectories": self.trajectories, "n_values": self.n_values,
                "grid": self.grid, "clock": self.clock, "discarded": self.discarded,
                "observables": sorted(self.stats)}


def time_grid(n_values: Sequence[int], grid: Sequence[float]) -> np.ndarray:
    return np.unique(np.array([n * s for n in n_values for s in grid], dtype=float))


def run_ensemble(dynamics: DynamicsStrategy, observables: Dict[str, Any], n_values: Sequence[int],
                 trajectories: int, seed: int, grid: Sequence[float] = DEFAULT_GRID,
                 clock: str = "map", law: str = "mu_delta0", pool=None, retry_budget: int = 3,
                 order: int = GL_ORDER, chunk_size: int = CHUNK_SIZE) -> EnsembleRun:
    """Simulates trajectories from the initial law and records every statistic on the n·s grid in one pass.

    For clock="flow" the observables are flow observables and the times are flow times.
    """
    if clock not in ("map", "flow"):
        raise ConfigInvalid(f"ensemble.clock: unknown clock '{clock}'")
    if not observables:
        raise ConfigInvalid("observables: at least one observable is required")
    n_values = sorted(int(n) for n in n_values)
    grid = sorted(float(s) for s in grid)
    if not grid or grid[0] <= 0:
        raise ConfigInvalid("ensemble.grid: must be non-empty and positive")
    times = time_grid(n_values, grid)
    where = {(i, j): int(np.searchsorted(times, n * s))
             for i, n in enumerate(n_values) for j, s in enumerate(grid)}
    starts = list(range(0, trajectories, chunk_size))

    def work_chunk(lo):
        idx = np.arange(lo, min(lo + chunk_size, trajectories))
        logging.debug(f"[Ensemble] chunk at {lo} started ({len(idx)} trajectories, clock={clock})")

        def run(walk: Walk):
            if clock == "map":
                return birkhoff_sums(walk, observables, times)
            return flow_sums(walk, observables, times, order)

        out, discarded = run_lanes(run, dynamics, idx, seed, law, retry_budget)
        if discarded:
            logging.warning(f"[Ensemble] chunk at {lo}: {discarded} trajectories resampled")
        return out, discarded

    parts = pool.map(work_chunk, starts) if pool is not None else [work_chunk(lo) for lo in starts]
    stats_out = {}
    for name in observables:
        flat = np.concatenate([p[0][name] for p in parts], axis=0)
        table = np.zeros((len(flat), len(n_values), len(grid)))
        for (i, j), k in where.items():
            table[:, i, j] = flat[:, k]
        stats_out[name] = table
    discarded = sum(p[1] for p in parts)
    logging.info(f"[Ensemble] {trajectories} trajectories on {len(times)} times ({clock} clock), "
                 f"{discarded} resampled")
    return EnsembleRun(seed, trajectories, n_values, grid, clock, stats_out, discarded)


def ensemble_from_arrays(values: Dict[str, np.ndarray], n_values: Sequence[int], seed: int = 0,
                         clock: str = "map") -> EnsembleRun:
    """Wraps (trajectories, len(n_values)) tables, such as oracle simulations, as a single-point-grid run."""
    stats_out = {name: np.asarray(v, dtype=float)[:, :, None] for name, v in values.items()}
    count = len(next(iter(stats_out.values()))) if stats_out else 0
    return EnsembleRun(seed, count, [int(n) for n in n_values], [1.0], clock, stats_out)

# ==========================================
# Law Tests
# ==========================================
@dataclass
class LawTestReport:
    target: str
    params: Dict[str, float]
    n: int
    ks: float
    p_value: float
    moments: Dict[str, Dict[str, float]]
    qq: List[Dict[str, float]] = field(default_factory=list)
    cdf: List[Dict[str, float]] = field(default_factory=list)
    degenerate: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {"target": self.target, "params": self.params, "n": self.n, "ks": self.ks,
                "p_value": self.p_value, "moments": self.moments, "degenerate": self.degenerate}


def _law_report(target: str, values: np.ndarray, dist, n: int, params, batches: int) -> LawTestReport:
    values = np.asarray(values, dtype=float)
    res = stats.kstest(values, dist.cdf)
    return LawTestReport(target, params, n, float(res.statistic), float(res.pvalue),
                         moment_table(values, batches), qq_table(values, dist), cdf_table(values, dist))


def _degenerate(target: str, values: np.ndarray, n: int, params) -> LawTestReport:
    values = np.asarray(values, dtype=float)
    zero = {"value": 0.0, "stderr": 0.0}
    return LawTestReport(target, params, n, float("nan"), float("nan"),
                         {"mean": {"value": float(values.mean()) if len(values) else 0.0, "stderr": 0.0},
                          "variance": zero, "excess_kurtosis": zero},
                         degenerate=True)


def exponential_law(values: np.ndarray, n: int, mean: float, batches: int = BATCH_COUNT) -> LawTestReport:
    """S_n g / ln n against the exponential law with the given mean."""
    x = np.asarray(values, dtype=float) / math.log(n)
    params = {"mean": float(mean)}
    if mean <= 0.0 or not np.any(x):
        logging.warning(f"[LimitLaw] exponential test at n={n} is degenerate (mean {mean})")
        return _degenerate("exponential", x, n, params)
    return _law_report("exponential", x, stats.expon(scale=mean), n, params, batches)


def laplace_law(values: np.ndarray, n: int, phi0: float, sigma_sq: float,
                sigma_stderr: float = 0.0, batches: int = BATCH_COUNT) -> LawTestReport:
    """S_n f / √(Φ(0)·σ̃²·ln n) against the centered Laplace law of variance 1."""
    if sigma_sq <= 3.0 * sigma_stderr or sigma_sq <= 0.0:
        raise VarianceDegenerate(f"σ̃² = {sigma_sq:.4g} not above 3 stderr ({sigma_stderr:.3g})",
                                 sigma_sq=sigma_sq, stderr=sigma_stderr)
    x = np.asarray(values, dtype=float) / math.sqrt(phi0 * sigma_sq * math.log(n))
    return _law_report("laplace", x, LAPLACE, n, {"phi0": phi0, "sigma_sq": sigma_sq, "variance": 1.0},
                       batches)


def trend(reports: Sequence[LawTestReport]) -> Dict[str, Any]:
    ks = [r.ks for r in reports]
    decreasing = all(b < a for a, b in zip(ks, ks[1:])) if len(ks) > 1 else True
    return {"n": [r.n for r in reports], "ks": ks, "decreasing": bool(decreasing),
            "final": ks[-1] if ks else None}


@dataclass
class LawSeries:
    reports: List[LawTestReport]
    trend: Dict[str, Any]

    def to_dict(self) -> Dict[str, Any]:
        return {"reports": [r.to_dict() for r in self.reports], "trend": self.trend}


def exponential_test(run: EnsembleRun, g: str, integral: float, phi0: float,
                     batches: int = BATCH_COUNT) -> LawSeries:
    """Exponential law with mean I(g)·Φ(0) at every n of the run."""
    reports = [exponential_law(run.at(g, n), n, integral * phi0, batches) for n in run.n_values]
    return LawSeries(reports, trend(reports))


def laplace_test(run: EnsembleRun, f: str, phi0: float, sigma_sq: float, sigma_stderr: float = 0.0,
                 batches: int = BATCH_COUNT) -> LawSeries:
    reports = [laplace_law(run.at(f, n), n, phi0, sigma_sq, sigma_stderr, batches) for n in run.n_values]
    return LawSeries(reports, trend(reports))

# ==========================================
# Joint Dependence
# ==========================================
@dataclass
class JointReport:
    slope: float
    slope_ci: List[float]
    intercept: float
    intercept_z: float
    expected_slope: Optional[float]
    contains_expected: Optional[bool]
    max_mean_z: float
    bins: List[Dict[str, float]]
    control: Optional["JointReport"] = None

    def to_dict(self) -> Dict[str, Any]:
        data = {"slope": self.slope, "slope_ci": self.slope_ci, "intercept": self.intercept,
                "intercept_z": self.intercept_z, "expected_slope": self.expected_slope,
                "contains_expected": self.contains_expected, "max_mean_z": self.max_mean_z,
                "bins": self.bins}
        if self.control is not None:
            data["shuffled_control"] = self.control.to_dict()
        return data


def _weighted_line(x, y, se):
    """Weighted least squares y = a + b·x with weights 1/se²; returns a, b and their stderrs."""
    w = 1.0 / np.maximum(se, 1e-300) ** 2
    A = np.stack([np.ones_like(x), x], axis=1)
    cov = np.linalg.inv(A.T @ (A * w[:, None]))
    a, b = cov @ (A.T @ (w * y))
    return float(a), float(b), float(math.sqrt(cov[0, 0])), float(math.sqrt(cov[1, 1]))


def joint_dependence(X: np.ndarray, Y: np.ndarray, expected_slope: Optional[float] = None,
                     bins: int = 10, min_per_bin: int = 30, rng: Optional[np.random.Generator] = None,
                     control: bool = True, level: float = 0.95) -> JointReport:
    """Checks E[Y²|X] = slope·X through the origin and E[Y|X] = 0, bin by bin in quantiles of X."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    edges = np.unique(np.quantile(X, np.linspace(0.0, 1.0, bins + 1)))
    label = np.clip(np.searchsorted(edges, X, side="right") - 1, 0, max(len(edges) - 2, 0))
    rows = []
    for b in range(max(len(edges) - 1, 0)):
        sel = label == b
        k = int(sel.sum())
        if k < min_per_bin:
            continue
        y, y2 = Y[sel], Y[sel] ** 2
        rows.append({"x": float(X[sel].mean()), "count": k,
                     "m2": float(y2.mean()), "m2_stderr": float(y2.std(ddof=1) / math.sqrt(k)),
                     "m1": float(y.mean()), "m1_stderr": float(y.std(ddof=1) / math.sqrt(k))})
    if len(rows) < 3:
        raise InsufficientBins(f"only {len(rows)} bins with at least {min_per_bin} samples",
                               bins=len(rows))
    x = np.array([r["x"] for r in rows])
    m2 = np.array([r["m2"] for r in rows])
    se = np.array([r["m2_stderr"] for r in rows])
    a, b, se_a, se_b = _weighted_line(x, m2, se)
    zq = float(stats.norm.ppf(0.5 + level / 2.0))
    ci = [b - zq * se_b, b + zq * se_b]
    with np.errstate(divide="ignore", invalid="ignore"):
        mean_z = np.array([abs(r["m1"]) / r["m1_stderr"] if r["m1_stderr"] > 0 else 0.0 for r in rows])
    report = JointReport(b, ci, a, a / se_a if se_a > 0 else 0.0, expected_slope,
                         None if expected_slope is None else bool(ci[0] <= expected_slope <= ci[1]),
                         float(mean_z.max()), rows)
    if control:
        rng = rng if rng is not None else np.random.default_rng(0)
        report.control = joint_dependence(X, rng.permutation(Y), expected_slope, bins, min_per_bin,
                                          control=False, level=level)
    return report


def joint_test(run: EnsembleRun, g: str, f: str, n: int, integral: float, sigma_sq: float,
               bins: int = 10, rng: Optional[np.random.Generator] = None) -> JointReport:
    """(S_n g/ln n, S_n f/√ln n): conditional second moment linear with slope σ̃²/I(g)."""
    ln = math.log(n)
    return joint_dependence(run.at(g, n) / ln, run.at(f, n) / math.sqrt(ln),
                            sigma_sq / integral if integral else None, bins, rng=rng)

# ==========================================
# Functional Flatness
# ==========================================
def functional_flatness(run: EnsembleRun, name: str, scaling: str = "sqrt",
                        batches: int = BATCH_COUNT) -> Dict[str, Any]:
    """W_n = max_s |S_{ns} − S_{nT₁}| / √ln n (or / ln n) over the grid, averaged per n."""
    if scaling not in ("sqrt", "log"):
        raise ConfigInvalid(f"limit_tests.flatness.scaling: unknown '{scaling}'")
    t1, t2 = min(run.grid), max(run.grid)
    rows = []
    for n in run.n_values:
        win = run.window(name, n)
        ln = math.log(n)
        norm = math.sqrt(ln) if scaling == "sqrt" else ln
        W = np.abs(win - win[:, :1]).max(axis=1) / norm
        row = {"n": n, "mean": float(W.mean()),
               "stderr": batch_stderr(W, batches) if np.any(W) else 0.0}
        if scaling == "log":
            row["bound_shape"] = math.log(math.ceil(n * t2) / max(math.floor(n * t1), 1)) / ln
        rows.append(row)
    monotone = all(b["mean"] <= a["mean"] + 2.0 * math.hypot(a["stderr"], b["stderr"])
                   for a, b in zip(rows, rows[1:]))
    return {"observable": name, "scaling": scaling, "window": [t1, t2], "rows": rows,
            "decreasing": bool(monotone)}

# ==========================================
# Flow Clock and Nested Times
# ==========================================
def flow_tests(run: EnsembleRun, theta: Optional[str], psi: Optional[str], psi_integral: float,
               phi0: float, sigma_sq: Optional[float] = None, sigma_stderr: float = 0.0,
               batches: int = BATCH_COUNT) -> Dict[str, Any]:
    """Exponential law for ∫ψ (mean ν̃(ψ)·Φ(0)) and Laplace law for ∫θ (scale σ̃(G(θ))) in flow time."""
    if run.clock != "flow":
        raise ConfigInvalid("limit_tests.flow: ensemble was not recorded in flow time")
    out: Dict[str, Any] = {"normalization": "flow measure of the unit cell = π / Σ|∂O_i|"}
    if psi is not None:
        out["exponential"] = exponential_test(run, psi, psi_integral, phi0, batches)
    if theta is not None and sigma_sq is not None:
        out["laplace"] = laplace_test(run, theta, phi0, sigma_sq, sigma_stderr, batches)
    return out


def two_sample_nested_check(run_a: EnsembleRun, run_b: EnsembleRun, name: str, time: float,
                            threshold: float = 0.01) -> Dict[str, Any]:
    """Values at one time from two runs (one nested in a longer grid) should share a law."""
    res = stats.ks_2samp(run_a.at_time(name, time), run_b.at_time(name, time))
    return {"observable": name, "time": time, "statistic": float(res.statistic),
            "p_value": float(res.pvalue), "passed": bool(res.pvalue > threshold)}
