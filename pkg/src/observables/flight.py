"""Integrals of flow observables along free flights, and G(theta) as a map observable."""
import math
from functools import lru_cache
from typing import Optional

import numpy as np

from ..core import GL_ORDER, QuadratureUnstable
from ..geometry import TableConfig, BoundaryBatch, BoundaryCoord, chart_batch, free_flight_batch
from .base import CellObservable, FlowObservable, encode_cells


@lru_cache(maxsize=8)
def gauss_legendre(order: int):
    return np.polynomial.legendre.leggauss(order)


def _axis_crossings(p0: np.ndarray, v: np.ndarray, length: np.ndarray, count: int) -> np.ndarray:
    """Flight parameters where one coordinate crosses an integer, clipped to [0, length]."""
    step = np.arange(count)
    with np.errstate(divide="ignore", invalid="ignore"):
        first = np.where(v > 0, np.floor(p0) + 1.0, np.ceil(p0) - 1.0)
        sign = np.where(v > 0, 1.0, -1.0)
        s = (first[:, None] + sign[:, None] * step[None, :] - p0[:, None]) / v[:, None]
    s = np.where(np.isfinite(s), s, length[:, None])
    return np.clip(s, 0.0, length[:, None])


def piece_integrals(profile, p0: np.ndarray, v: np.ndarray, length: np.ndarray,
                    order: int = GL_ORDER):
    """Splits each segment p0 + s v, 0 <= s <= length, at cell boundaries.

    Returns (cells (N, P, 2), integrals (N, P)) where integrals are those of
    profile(local position, v) over each piece.
    """
    p0 = np.asarray(p0, dtype=float)
    v = np.asarray(v, dtype=float)
    length = np.asarray(length, dtype=float)
    n = len(p0)
    count = int(math.ceil(float(length.max()))) + 2 if n else 1
    bp = np.concatenate([np.zeros((n, 1)),
                         _axis_crossings(p0[:, 0], v[:, 0], length, count),
                         _axis_crossings(p0[:, 1], v[:, 1], length, count),
                         length[:, None]], axis=1)
    bp.sort(axis=1)
    a, b = bp[:, :-1], bp[:, 1:]
    mid = p0[:, None, :] + (0.5 * (a + b))[..., None] * v[:, None, :]
    cells = np.floor(mid).astype(np.int64)

    x, w = gauss_legendre(order)
    s = a[..., None] + (b - a)[..., None] * (x + 1.0) * 0.5
    pos = p0[:, None, None, :] + s[..., None] * v[:, None, None, :]
    local = pos - cells[:, :, None, :]
    vb = np.broadcast_to(v[:, None, None, :], local.shape)
    vals = profile(local, vb)
    integrals = 0.5 * (b - a) * np.tensordot(vals, w, axes=([2], [0]))
    return cells, integrals


def integrate_segments(theta: FlowObservable, p0, v, length, order: int = GL_ORDER) -> np.ndarray:
    """∫_0^length theta(p0 + s v, v) ds per segment, absolute positions."""
    cells, integrals = piece_integrals(theta.profile, p0, v, length, order)
    return np.sum(theta.coefficient(cells) * integrals, axis=1)


def integrate_segment_adaptive(theta: FlowObservable, p0, v, length: float,
                               order: int = GL_ORDER, tol: float = 1e-10,
                               depth_cap: int = 20) -> float:
    """Scalar path: bisects each piece until two resolutions agree."""
    p0 = np.asarray(p0, dtype=float)
    v = np.asarray(v, dtype=float)

    def rule(start, end):
        val = integrate_segments(theta, (p0 + start * v)[None, :], v[None, :],
                                 np.array([end - start]), order)
        return float(val[0])

    def refine(start, end, whole, depth):
        mid = 0.5 * (start + end)
        left, right = rule(start, mid), rule(mid, end)
        if abs(left + right - whole) <= tol * max(1.0, abs(whole)):
            return left + right
        if depth >= depth_cap:
            raise QuadratureUnstable(f"no convergence on [{start}, {end}] at depth {depth}")
        return refine(start, mid, left, depth + 1) + refine(mid, end, right, depth + 1)

    if length <= 0.0:
        return 0.0
    return refine(0.0, float(length), rule(0.0, float(length)), 0)


class FlightIntegratedObservable(CellObservable):
    """G(theta)(x, a) = ∫_0^tau(x) theta along the flight leaving x in cell a."""

    def __init__(self, theta: FlowObservable, table: TableConfig, order: int = GL_ORDER):
        self.theta = theta
        self.table = table
        self.order = order
        self.name = f"G({theta.name})"
        self.exact_integral = theta.exact_flow_integral
        bound = table.horizon_bound if table.horizon_bound is not None else table.flight_cap
        self.reach = int(math.ceil(bound)) + 1

    def support(self):
        cells = self.theta.support()
        if cells is None:
            return None
        span = np.arange(-self.reach, self.reach + 1)
        dx, dy = np.meshgrid(span, span, indexing="ij")
        offsets = np.stack([dx.ravel(), dy.ravel()], axis=1)
        return np.unique((cells[:, None, :] - offsets[None, :, :]).reshape(-1, 2), axis=0)

    def pieces(self, batch: BoundaryBatch):
        q, v, _ = chart_batch(self.table, batch)
        fb = free_flight_batch(self.table, q, v, batch.idx)
        return piece_integrals(self.theta.profile, q, v, fb.tau, self.order)

    def evaluate_cells(self, batch, cells):
        offsets, integrals = self.pieces(batch)
        cells = np.asarray(cells, dtype=np.int64)
        coeff = self.theta.coefficient(cells[:, :, None, :] + offsets[:, None, :, :])
        return np.sum(coeff * integrals[:, None, :], axis=2)

    def cell_norms(self):
        cells = self.support()
        bound = self.reach - 1
        sup = np.full(len(cells), bound * _flow_sup(self.theta))
        return cells, sup, sup


def _flow_sup(theta: FlowObservable) -> float:
    cells = theta.support()
    if cells is None or not len(cells):
        return 0.0
    return float(np.abs(theta.coefficient(cells)).max())


def flight_integrate(theta: FlowObservable, x: BoundaryCoord, a, table: TableConfig,
                     order: int = GL_ORDER) -> float:
    """G(theta)(x, a) for a single collision point, with adaptive refinement."""
    q, v, _ = chart_batch(table, BoundaryBatch.of([x]))
    fb = free_flight_batch(table, q, v, np.array([x.index]))
    start = q[0] + np.asarray(a, dtype=float)
    return integrate_segment_adaptive(theta, start, v[0], float(fb.tau[0]), order)
