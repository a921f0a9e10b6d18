from typing import Callable, Dict, List, Optional

import numpy as np
from scipy import stats


class CompensatedSum:
    """Kahan accumulator over a vector of lanes."""

    def __init__(self, shape):
        self.total = np.zeros(shape)
        self._comp = np.zeros(shape)

    def add(self, values, mask=None):
        values = np.asarray(values, dtype=float)
        if mask is not None:
            values = np.where(mask, values, 0.0)
        y = values - self._comp
        t = self.total + y
        self._comp = (t - self.total) - y
        self.total = t

    def reset(self, sel):
        self.total[sel] = 0.0
        self._comp[sel] = 0.0

    def take(self, keep) -> "CompensatedSum":
        out = CompensatedSum(0)
        out.total = self.total[keep].copy()
        out._comp = self._comp[keep].copy()
        return out


def group_ids(indices, batches: int) -> np.ndarray:
    """Batch-means group of each trajectory index."""
    return np.asarray(indices, dtype=np.int64) % batches


def batch_stderr(values: np.ndarray, batches: int,
                 statistic: Callable[[np.ndarray], float] = np.mean) -> float:
    """Stderr of `statistic` from its spread over contiguous batches."""
    values = np.asarray(values, dtype=float)
    batches = max(2, min(batches, len(values)))
    if len(values) < 2:
        return float("nan")
    per_batch = np.array([statistic(chunk) for chunk in np.array_split(values, batches)])
    return float(per_batch.std(ddof=1) / np.sqrt(batches))


def moment_table(values: np.ndarray, batches: int) -> Dict[str, Dict[str, float]]:
    values = np.asarray(values, dtype=float)
    return {
        "mean": {"value": float(values.mean()),
                 "stderr": batch_stderr(values, batches, np.mean)},
        "variance": {"value": float(values.var(ddof=1)),
                     "stderr": batch_stderr(values, batches, lambda x: x.var(ddof=1))},
        "excess_kurtosis": {"value": float(stats.kurtosis(values, fisher=True)),
                            "stderr": batch_stderr(values, batches,
                                                   lambda x: stats.kurtosis(x, fisher=True))},
    }


def qq_table(values: np.ndarray, dist, levels: Optional[np.ndarray] = None) -> List[Dict[str, float]]:
    if levels is None:
        levels = np.linspace(0.05, 0.95, 19)
    empirical = np.quantile(values, levels)
    theoretical = dist.ppf(levels)
    return [{"quantile": float(q), "empirical": float(e), "theoretical": float(t)}
            for q, e, t in zip(levels, empirical, theoretical)]


def cdf_table(values: np.ndarray, dist, points: int = 21) -> List[Dict[str, float]]:
    """Right-continuous empirical CDF against the model CDF at evenly spaced points."""
    values = np.sort(np.asarray(values, dtype=float))
    grid = np.linspace(values[0], values[-1], points) if len(values) else np.zeros(0)
    ecdf = np.searchsorted(values, grid, side="right") / max(len(values), 1)
    return [{"x": float(x), "empirical": float(e), "theoretical": float(t)}
            for x, e, t in zip(grid, ecdf, dist.cdf(grid))]


def gaussian_density(sigma_sq: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Φ(x) = exp(−<Σ⁻²x,x>/2) / (2π √det Σ²) for x of shape (..., 2)."""
    inv = np.linalg.inv(sigma_sq)
    q = np.einsum("...i,ij,...j->...", x, inv, x)
    return np.exp(-0.5 * q) / (2.0 * np.pi * np.sqrt(np.linalg.det(sigma_sq)))
