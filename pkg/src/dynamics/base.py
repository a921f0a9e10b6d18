import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np

from ..core import ConfigInvalid, RetryBudgetExhausted
from ..utils.rng import trajectory_uniforms, chunk_generator

INITIAL_LAWS = ("mu_delta0", "mu_box3")


@dataclass(frozen=True)
class ExtendedState:
    base: Any
    cell: Tuple[int, int]


@dataclass(frozen=True)
class FlowState:
    last_collision: ExtendedState
    elapsed_since: float = 0.0


@dataclass
class StepResult:
    batch: Any
    F: np.ndarray
    tau: np.ndarray
    failed: np.ndarray
    origin: Optional[np.ndarray] = None
    velocity: Optional[np.ndarray] = None


class DynamicsStrategy(ABC):
    """A probability-preserving base map with a Z² step function.

    Both the billiard and the finite-state oracle chain implement this, so
    ensembles, Birkhoff sums and estimators are written once.
    """
    name = "abstract"
    uniforms_per_state = 1
    has_flow = False

    @abstractmethod
    def sample_base(self, uniforms: np.ndarray):
        """Maps (N, uniforms_per_state) uniforms to N invariant-law base points."""

    @abstractmethod
    def advance(self, batch, rng: np.random.Generator) -> StepResult:
        pass

    @abstractmethod
    def batch_of(self, bases):
        pass

    @abstractmethod
    def item(self, batch, k: int):
        pass

    def sample_initial(self, indices, seed: int, attempt: int = 0, law: str = "mu_delta0"):
        if law not in INITIAL_LAWS:
            raise ConfigInvalid(f"ensemble.law: unknown initial law '{law}'")
        extra = 1 if law == "mu_box3" else 0
        u = trajectory_uniforms(seed, indices, self.uniforms_per_state + extra, attempt)
        batch = self.sample_base(u[:, :self.uniforms_per_state])
        cells = np.zeros((len(u), 2), dtype=np.int64)
        if extra:
            k = np.minimum((u[:, -1] * 9).astype(np.int64), 8)
            cells[:, 0] = k // 3 - 1
            cells[:, 1] = k % 3 - 1
        return batch, cells

    def step_extension(self, s: ExtendedState, rng: Optional[np.random.Generator] = None) -> ExtendedState:
        res = self.advance(self.batch_of([s.base]), rng)
        F = res.F[0]
        return ExtendedState(self.item(res.batch, 0), (s.cell[0] + int(F[0]), s.cell[1] + int(F[1])))


class Walk:
    """Lockstep group of trajectories."""

    def __init__(self, dynamics: DynamicsStrategy, indices, seed: int,
                 attempt: int = 0, law: str = "mu_delta0"):
        self.dynamics = dynamics
        self.indices = np.asarray(indices, dtype=np.int64)
        self.batch, self.cells = dynamics.sample_initial(self.indices, seed, attempt, law)
        first = int(self.indices[0]) if len(self.indices) else 0
        self.rng = chunk_generator(seed, first, attempt)
        self.failed = np.zeros(len(self.indices), dtype=bool)
        self.steps = 0

    @classmethod
    def from_states(cls, dynamics: DynamicsStrategy, batch, cells,
                    rng: Optional[np.random.Generator] = None) -> "Walk":
        """Walk over given starting states instead of sampled ones."""
        walk = cls.__new__(cls)
        walk.dynamics = dynamics
        walk.batch = batch
        walk.cells = np.array(cells, dtype=np.int64).reshape(-1, 2)
        walk.indices = np.arange(len(walk.cells), dtype=np.int64)
        walk.rng = rng if rng is not None else chunk_generator(0, 0)
        walk.failed = np.zeros(len(walk.cells), dtype=bool)
        walk.steps = 0
        return walk

    def __len__(self):
        return len(self.indices)

    def keep(self, mask):
        """Drops the lanes where mask is False."""
        self.batch = self.batch.take(mask)
        self.cells = self.cells[mask]
        self.indices = self.indices[mask]
        self.failed = self.failed[mask]

    def step(self) -> StepResult:
        res = self.dynamics.advance(self.batch, self.rng)
        self.failed |= res.failed
        self.batch = res.batch
        self.cells = self.cells + res.F
        self.steps += 1
        return res


def run_lanes(work: Callable[[Walk], Dict[str, np.ndarray]], dynamics: DynamicsStrategy,
              indices, seed: int, law: str = "mu_delta0",
              retry_budget: int = 3) -> Tuple[Dict[str, np.ndarray], int]:
    """Runs work(walk) and resamples lanes whose trajectory hit a tangency.

    work returns per-lane arrays (first axis = lane). Returns the merged
    arrays and the number of discarded trajectories.
    """
    indices = np.asarray(indices, dtype=np.int64)
    walk = Walk(dynamics, indices, seed, 0, law)
    out = work(walk)
    failed = walk.failed.copy()
    attempt = 0
    discarded = 0
    while failed.any():
        attempt += 1
        discarded += int(failed.sum())
        if attempt > retry_budget:
            raise RetryBudgetExhausted(f"{int(failed.sum())} trajectories still failing after "
                                       f"{retry_budget} retries")
        logging.warning(f"[Ensemble] tangency: resampling {int(failed.sum())} trajectories "
                        f"(attempt {attempt})")
        lanes = np.flatnonzero(failed)
        walk = Walk(dynamics, indices[lanes], seed, attempt, law)
        redo = work(walk)
        for key, values in redo.items():
            out[key][lanes] = values
        failed = np.zeros(len(indices), dtype=bool)
        failed[lanes[walk.failed]] = True
    return out, discarded
