from abc import ABC, abstractmethod
from typing import Dict, Optional, Tuple, List

import numpy as np

_SHIFT = np.int64(1) << np.int64(32)


def encode_cells(cells: np.ndarray) -> np.ndarray:
    cells = np.asarray(cells, dtype=np.int64)
    return cells[..., 0] * _SHIFT + cells[..., 1]


class CellTable:
    """Sparse coefficient table a -> c_a over Z²; zero off the table."""

    def __init__(self, coeffs: Dict[Tuple[int, int], float]):
        items = sorted(((int(a[0]), int(a[1])), float(c)) for a, c in coeffs.items() if c != 0.0)
        self.cells = np.array([a for a, _ in items], dtype=np.int64).reshape(-1, 2)
        self.values = np.array([c for _, c in items], dtype=float)
        self.keys = encode_cells(self.cells)
        order = np.argsort(self.keys)
        self.cells, self.values, self.keys = self.cells[order], self.values[order], self.keys[order]

    def __len__(self):
        return len(self.keys)

    def lookup(self, cells: np.ndarray) -> np.ndarray:
        keys = encode_cells(cells)
        if not len(self.keys):
            return np.zeros(keys.shape)
        pos = np.clip(np.searchsorted(self.keys, keys), 0, len(self.keys) - 1)
        return np.where(self.keys[pos] == keys, self.values[pos], 0.0)

    def items(self):
        return [((int(a[0]), int(a[1])), float(c)) for a, c in zip(self.cells, self.values)]

# ==========================================
# Base profiles w(x)
# ==========================================
class BaseProfile(ABC):
    """A function of the base point, with declared regularity metadata."""
    name = "profile"
    holder_exponent = 1.0
    sup_norm = 1.0
    holder_norm = 1.0
    exact_mean: Optional[float] = None

    @abstractmethod
    def __call__(self, batch) -> np.ndarray:
        pass

# ==========================================
# Map observables f(x, a)
# ==========================================
class CellObservable(ABC):
    """Per-cell family a -> f(., a) on the extension."""
    name = "observable"
    holder_exponent = 1.0
    exact_integral: Optional[float] = None
    integral_stderr: float = 0.0

    @abstractmethod
    def support(self) -> Optional[np.ndarray]:
        """(A, 2) cells where f(., a) may be nonzero; None if not finite."""

    @abstractmethod
    def evaluate_cells(self, batch, cells: np.ndarray) -> np.ndarray:
        """cells has shape (N, A, 2); returns f(batch[n], cells[n, j]) as (N, A)."""

    @abstractmethod
    def cell_norms(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Declared (cells, sup norms, Hölder norms) over the support."""

    def evaluate_batch(self, batch, cells: np.ndarray) -> np.ndarray:
        return self.evaluate_cells(batch, np.asarray(cells)[:, None, :])[:, 0]

    def scaled(self, c: float) -> "LinearCombination":
        return LinearCombination([(c, self)], name=f"{c}*{self.name}")

    def __neg__(self):
        return self.scaled(-1.0)


class ProfileObservable(CellObservable):
    """f(x, a) = c_a * w(x) over a finite coefficient table."""

    def __init__(self, table: CellTable, profile: BaseProfile, name: str = ""):
        self.table = table
        self.profile = profile
        self.name = name or profile.name
        self.holder_exponent = profile.holder_exponent
        if profile.exact_mean is not None:
            self.exact_integral = float(profile.exact_mean * table.values.sum())

    def support(self):
        return self.table.cells

    def evaluate_cells(self, batch, cells):
        return self.table.lookup(cells) * self.profile(batch)[:, None]

    def cell_norms(self):
        mags = np.abs(self.table.values)
        return self.table.cells, mags * self.profile.sup_norm, mags * self.profile.holder_norm


class LinearCombination(CellObservable):
    """Σ coef_t f_t; the result of centering and scaling."""

    def __init__(self, terms: List[Tuple[float, CellObservable]], name: str = "",
                 exact_integral: Optional[float] = None, integral_stderr: float = 0.0):
        self.terms = [(float(c), f) for c, f in terms]
        self.name = name or "+".join(f.name for _, f in self.terms)
        self.holder_exponent = min(f.holder_exponent for _, f in self.terms)
        if exact_integral is None and all(f.exact_integral is not None for _, f in self.terms):
            exact_integral = sum(c * f.exact_integral for c, f in self.terms)
            integral_stderr = float(np.sqrt(sum((c * f.integral_stderr) ** 2 for c, f in self.terms)))
        self.exact_integral = exact_integral
        self.integral_stderr = integral_stderr

    def support(self):
        parts = [f.support() for _, f in self.terms]
        if any(p is None for p in parts):
            return None
        return np.unique(np.concatenate(parts, axis=0), axis=0)

    def evaluate_cells(self, batch, cells):
        total = np.zeros(np.asarray(cells).shape[:2])
        for c, f in self.terms:
            total = total + c * f.evaluate_cells(batch, cells)
        return total

    def cell_norms(self):
        cells = self.support()
        sup = np.zeros(len(cells))
        hol = np.zeros(len(cells))
        keys = encode_cells(cells)
        for c, f in self.terms:
            fc, fs, fh = f.cell_norms()
            pos = np.searchsorted(keys, encode_cells(fc))
            np.add.at(sup, pos, abs(c) * fs)
            np.add.at(hol, pos, abs(c) * fh)
        return cells, sup, hol


class EnvelopeObservable(CellObservable):
    """f(x, a) = e(|a|) * w(x) with a decay envelope; truncated for evaluation."""

    def __init__(self, envelope, profile: BaseProfile, truncation: int = 32,
                 holder_envelope=None, name: str = "envelope"):
        self.envelope = envelope
        self.holder_envelope = holder_envelope or envelope
        self.profile = profile
        self.truncation = truncation
        self.name = name

    def support(self):
        span = np.arange(-self.truncation, self.truncation + 1)
        gx, gy = np.meshgrid(span, span, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    def evaluate_cells(self, batch, cells):
        cells = np.asarray(cells)
        norm = np.hypot(cells[..., 0], cells[..., 1])
        inside = np.abs(cells).max(axis=-1) <= self.truncation
        return np.where(inside, self.envelope(norm), 0.0) * self.profile(batch)[:, None]

    def cell_norms(self):
        cells = self.support()
        norm = np.hypot(cells[:, 0], cells[:, 1])
        return (cells, self.envelope(norm) * self.profile.sup_norm,
                self.holder_envelope(norm) * self.profile.holder_norm)

# ==========================================
# Flow observables theta(q, v)
# ==========================================
class FlowProfile(ABC):
    name = "flow-profile"
    holder_exponent = 1.0
    cell_mean: Optional[float] = None

    @abstractmethod
    def __call__(self, local: np.ndarray, v: np.ndarray) -> np.ndarray:
        """local: position inside the unit cell, v: unit velocity; both (..., 2)."""


class FlowObservable(ABC):
    """theta(q, v) = c_{floor q} * w(q - floor q, v)."""
    name = "flow-observable"
    exact_flow_integral: Optional[float] = None

    @abstractmethod
    def support(self) -> Optional[np.ndarray]:
        pass

    @abstractmethod
    def coefficient(self, cells: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def profile(self, local: np.ndarray, v: np.ndarray) -> np.ndarray:
        pass

    def value(self, q, v) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        cell = np.floor(q)
        return self.coefficient(cell.astype(np.int64)) * self.profile(q - cell, np.asarray(v, dtype=float))


class CellFlowObservable(FlowObservable):

    def __init__(self, table: CellTable, flow_profile: FlowProfile, name: str = ""):
        self.table = table
        self.flow_profile = flow_profile
        self.name = name or flow_profile.name
        if flow_profile.cell_mean is not None:
            self.exact_flow_integral = float(table.values.sum() * flow_profile.cell_mean)

    def support(self):
        return self.table.cells

    def coefficient(self, cells):
        return self.table.lookup(cells)

    def profile(self, local, v):
        return self.flow_profile(local, v)


class ConstantFlowObservable(FlowObservable):

    def __init__(self, value: float = 1.0, name: str = "constant"):
        self.constant = float(value)
        self.name = name

    def support(self):
        return None

    def coefficient(self, cells):
        return np.full(np.asarray(cells).shape[:-1], self.constant)

    def profile(self, local, v):
        return np.ones(np.asarray(local).shape[:-1])
