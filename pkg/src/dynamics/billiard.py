import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import stats

from ..core import GL_ORDER, FlightCapExceeded, NumericalTangency, ReportIoError
from ..geometry import (
    TableConfig,
    BoundaryCoord,
    BoundaryBatch,
    chart_batch,
    coords_from_normal,
    free_flight_batch,
    reflect_batch,
)
from ..utils.rng import stream
from .base import DynamicsStrategy, ExtendedState, StepResult

TRAJECTORY_COLUMNS = ["step", "obstacle", "r", "phi", "cell_x", "cell_y", "tau", "F_x", "F_y"]


class BilliardDynamics(DynamicsStrategy):
    """Collision map T of the periodic Lorentz gas and its Z² extension."""
    name = "billiard"
    uniforms_per_state = 3
    has_flow = True

    def __init__(self, table: TableConfig, quadrature_order: int = GL_ORDER):
        self.table = table
        self.quadrature_order = quadrature_order
        weights = table.radii / table.radii.sum()
        self._index_cdf = np.cumsum(weights)

    # --- invariant measure ---
    def sample_base(self, uniforms: np.ndarray) -> BoundaryBatch:
        idx = np.minimum(np.searchsorted(self._index_cdf, uniforms[:, 0], side="right"),
                         self.table.count - 1).astype(np.int64)
        r = uniforms[:, 1] * self.table.perimeters[idx]
        phi = np.arcsin(2.0 * uniforms[:, 2] - 1.0)
        return BoundaryBatch(idx, r, phi)

    def sample_invariant(self, rng: np.random.Generator) -> BoundaryCoord:
        return self.sample_base(rng.random((1, 3))).item(0)

    def sample_cell0(self, rng: np.random.Generator) -> ExtendedState:
        return ExtendedState(self.sample_invariant(rng), (0, 0))

    def batch_of(self, bases) -> BoundaryBatch:
        return BoundaryBatch.of(bases)

    def item(self, batch: BoundaryBatch, k: int) -> BoundaryCoord:
        return batch.item(k)

    # --- the map ---
    def advance(self, batch: BoundaryBatch, rng: Optional[np.random.Generator] = None) -> StepResult:
        q, v, _ = chart_batch(self.table, batch)
        fb = free_flight_batch(self.table, q, v, batch.idx)
        if fb.exceeded.any():
            k = int(np.flatnonzero(fb.exceeded)[0])
            raise FlightCapExceeded(
                f"flight from {batch.item(k)} exceeds the horizon bound",
                bound=self.table.horizon_bound)
        v_out = reflect_batch(v, fb.normal)
        r, phi = coords_from_normal(self.table, fb.idx, fb.normal, v_out)
        return StepResult(BoundaryBatch(fb.idx, r, phi), fb.cell_jump, fb.tau,
                          fb.tangent, origin=q, velocity=v)

    def billiard_map(self, x: BoundaryCoord) -> Tuple[BoundaryCoord, Tuple[int, int], float]:
        res = self.advance(BoundaryBatch.of([x]))
        if res.failed[0]:
            raise NumericalTangency(f"grazing collision after {x}")
        F = res.F[0]
        return res.batch.item(0), (int(F[0]), int(F[1])), float(res.tau[0])

    def step_extension(self, s: ExtendedState, rng=None) -> ExtendedState:
        x, F, _ = self.billiard_map(s.base)
        return ExtendedState(x, (s.cell[0] + F[0], s.cell[1] + F[1]))

    def record_trajectory(self, s0: ExtendedState, n: int, stride: int = 1,
                          seed_material: Optional[dict] = None) -> "TrajectoryRecord":
        rows = []
        batch = BoundaryBatch.of([s0.base])
        cell = np.array(s0.cell, dtype=np.int64)
        for k in range(n):
            res = self.advance(batch)
            if res.failed[0]:
                raise NumericalTangency(f"grazing collision at step {k}")
            if k % stride == 0:
                rows.append((k, int(batch.idx[0]), float(batch.r[0]), float(batch.phi[0]),
                             int(cell[0]), int(cell[1]), float(res.tau[0]),
                             int(res.F[0, 0]), int(res.F[0, 1])))
            cell = cell + res.F[0]
            batch = res.batch
        return TrajectoryRecord.from_rows(rows, stride, seed_material or {})

    def invariance_check(self, samples: int, seed: int, bins: int = 20) -> dict:
        """Chi-square of the T-pushforward of μ against μ.

        Under μ the normalized arclength r/|∂O_i| and (1 + sin φ)/2 are uniform and
        independent, and the obstacle index has probability ∝ radius.
        """
        rng = stream(seed, 0)
        res = self.advance(self.sample_base(rng.random((samples, 3))))
        ok = ~res.failed
        batch = res.batch.take(ok)
        n = len(batch)
        s = np.minimum((batch.r / self.table.perimeters[batch.idx] * bins).astype(np.int64), bins - 1)
        u = np.minimum(((1.0 + np.sin(batch.phi)) / 2.0 * bins).astype(np.int64), bins - 1)
        weights = self.table.radii / self.table.radii.sum()

        def test(observed, expected):
            return float(stats.chisquare(observed, expected * n / expected.sum()).pvalue)

        flat = np.ones(bins)
        joint_bins = max(2, bins // 4)
        sj = s * joint_bins // bins
        uj = u * joint_bins // bins
        joint = np.bincount((batch.idx * joint_bins + sj) * joint_bins + uj,
                            minlength=self.table.count * joint_bins ** 2)
        expected_joint = np.repeat(weights, joint_bins ** 2)
        out = {
            "samples": n,
            "discarded": int((~ok).sum()),
            "p_obstacle": test(np.bincount(batch.idx, minlength=self.table.count), weights),
            "p_r": test(np.bincount(s, minlength=bins), flat),
            "p_phi": test(np.bincount(u, minlength=bins), flat),
            "p_joint": test(joint, expected_joint),
        }
        logging.info(f"[Billiard] invariance check: {out}")
        return out


@dataclass
class TrajectoryRecord:
    seed_material: dict
    stride: int
    step: np.ndarray
    obstacle: np.ndarray
    r: np.ndarray
    phi: np.ndarray
    cell: np.ndarray
    tau: np.ndarray
    F: np.ndarray

    @classmethod
    def from_rows(cls, rows, stride: int, seed_material: dict) -> "TrajectoryRecord":
        arr = list(zip(*rows)) if rows else [[]] * 9
        return cls(seed_material, stride,
                   np.array(arr[0], dtype=np.int64), np.array(arr[1], dtype=np.int64),
                   np.array(arr[2], dtype=float), np.array(arr[3], dtype=float),
                   np.stack([np.array(arr[4], dtype=np.int64), np.array(arr[5], dtype=np.int64)], axis=1),
                   np.array(arr[6], dtype=float),
                   np.stack([np.array(arr[7], dtype=np.int64), np.array(arr[8], dtype=np.int64)], axis=1))

    @property
    def total_time(self) -> float:
        return float(np.sum(self.tau))

    def rows(self):
        for k in range(len(self.step)):
            yield {"step": int(self.step[k]), "obstacle": int(self.obstacle[k]),
                   "r": float(self.r[k]), "phi": float(self.phi[k]),
                   "cell_x": int(self.cell[k, 0]), "cell_y": int(self.cell[k, 1]),
                   "tau": float(self.tau[k]), "F_x": int(self.F[k, 0]), "F_y": int(self.F[k, 1])}

    def to_csv(self, path: str):
        try:
            with open(path, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(TRAJECTORY_COLUMNS)
                for row in self.rows():
                    writer.writerow([repr(v) if isinstance(v, float) else v for v in row.values()])
        except OSError as e:
            logging.error(f"[TrajectoryRecord] 写入失败: {e}")
            raise ReportIoError(str(e)) from e

    def to_npz(self, path: str):
        try:
            np.savez(path, step=self.step, obstacle=self.obstacle, r=self.r, phi=self.phi,
                     cell=self.cell, tau=self.tau, F=self.F, stride=self.stride)
        except OSError as e:
            logging.error(f"[TrajectoryRecord] 写入失败: {e}")
            raise ReportIoError(str(e)) from e
