"""Geometry of the Z²-periodic table.

Conventions: boundary point (i, r, phi) sits at c_i + rho_i * n with
n = (cos r/rho_i, sin r/rho_i) (arclength origin c_i + (rho_i, 0),
counterclockwise). The outgoing velocity makes angle phi with n,
counterclockwise positive, so its direction angle is r/rho_i + phi.
"""
import math
import logging
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from typing import Optional, Tuple, List, Dict, Any

import numpy as np

from .core import (
    TANGENCY_EPS,
    BOUNDARY_TOL,
    DEFAULT_FLIGHT_CAP,
    DEFAULT_PROBE_POINTS,
    DEFAULT_PROBE_DIRECTIONS,
    DEFAULT_HORIZON_MARGIN,
    CHUNK_SIZE,
    TableInvalid,
    OverlapError,
    HorizonSuspect,
    NotIncoming,
    OffBoundary,
    NumericalTangency,
    FlightCapExceeded,
)

TWO_PI = 2.0 * math.pi

# ==========================================
# Domain Types
# ==========================================
@dataclass(frozen=True)
class ObstacleDisk:
    center: Tuple[float, float]
    radius: float

    @property
    def perimeter(self) -> float:
        return TWO_PI * self.radius


@dataclass(frozen=True)
class TableConfig:
    obstacles: Tuple[ObstacleDisk, ...]
    horizon_bound: Optional[float] = None
    flight_cap: float = DEFAULT_FLIGHT_CAP

    def __post_init__(self):
        obstacles = tuple(
            o if isinstance(o, ObstacleDisk) else ObstacleDisk(tuple(o[:2]), float(o[2]))
            for o in self.obstacles
        )
        object.__setattr__(self, "obstacles", obstacles)
        for k, o in enumerate(obstacles):
            if not o.radius > 0:
                raise TableInvalid(f"obstacle {k}: radius must be positive", index=k)
            if not (0.0 <= o.center[0] < 1.0 and 0.0 <= o.center[1] < 1.0):
                raise TableInvalid(f"obstacle {k}: center must lie in [0,1)^2", index=k)
        if self.horizon_bound is not None and not self.horizon_bound > 0:
            raise TableInvalid("horizon_bound must be positive")

    @classmethod
    def from_triples(cls, triples, horizon_bound=None, flight_cap=DEFAULT_FLIGHT_CAP) -> "TableConfig":
        return cls(tuple(ObstacleDisk((float(x), float(y)), float(r)) for x, y, r in triples),
                   horizon_bound, flight_cap)

    @property
    def count(self) -> int:
        return len(self.obstacles)

    @property
    def centers(self) -> np.ndarray:
        return np.array([o.center for o in self.obstacles], dtype=float)

    @property
    def radii(self) -> np.ndarray:
        return np.array([o.radius for o in self.obstacles], dtype=float)

    @property
    def perimeters(self) -> np.ndarray:
        return TWO_PI * self.radii

    @property
    def boundary_total(self) -> float:
        return float(sum(o.perimeter for o in self.obstacles))

    @property
    def free_area(self) -> float:
        """Area of the unit cell outside the obstacles."""
        return 1.0 - math.pi * float(np.sum(self.radii ** 2))

    @property
    def mean_free_path(self) -> float:
        """pi * area / total perimeter; also the flow-measure volume of one cell."""
        return math.pi * self.free_area / self.boundary_total

    def with_horizon(self, tau_max: float) -> "TableConfig":
        return TableConfig(self.obstacles, float(tau_max), self.flight_cap)


@dataclass(frozen=True)
class BoundaryCoord:
    index: int
    r: float
    phi: float


@dataclass
class BoundaryBatch:
    """Vectorized boundary coordinates."""
    idx: np.ndarray
    r: np.ndarray
    phi: np.ndarray

    def __len__(self):
        return len(self.idx)

    @classmethod
    def of(cls, coords) -> "BoundaryBatch":
        coords = list(coords)
        return cls(np.array([c.index for c in coords], dtype=np.int64),
                   np.array([c.r for c in coords], dtype=float),
                   np.array([c.phi for c in coords], dtype=float))

    def item(self, k: int) -> BoundaryCoord:
        return BoundaryCoord(int(self.idx[k]), float(self.r[k]), float(self.phi[k]))

    def take(self, sel) -> "BoundaryBatch":
        return BoundaryBatch(self.idx[sel], self.r[sel], self.phi[sel])

    def put(self, sel, other: "BoundaryBatch"):
        self.idx[sel] = other.idx
        self.r[sel] = other.r
        self.phi[sel] = other.phi

    def copy(self) -> "BoundaryBatch":
        return BoundaryBatch(self.idx.copy(), self.r.copy(), self.phi.copy())


@dataclass
class FlightBatch:
    """Per-ray outcome of a free flight. Positions are in the frame of the start."""
    idx: np.ndarray
    cell_jump: np.ndarray
    tau: np.ndarray
    normal: np.ndarray
    tangent: np.ndarray
    exceeded: np.ndarray


@dataclass(frozen=True)
class Flight:
    hit: BoundaryCoord
    cell_jump: Tuple[int, int]
    tau: float


@dataclass
class HorizonCertificate:
    tau_max: float
    tau_min: float
    tau_probe_max: Optional[float]
    margin: float
    probe_points: int
    probe_directions: int
    flight_cap: float
    corridors_checked: List[Tuple[int, int]] = field(default_factory=list)
    declared: bool = False
    heuristic: bool = True

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["corridors_checked"] = [list(d) for d in self.corridors_checked]
        return data

# ==========================================
# Reflection & Charts
# ==========================================
def reflect(v, n) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.asarray(n, dtype=float)
    d = float(v @ n)
    if d > 1e-14:
        raise NotIncoming(f"<v,n> = {d:.3e} > 0")
    return v - 2.0 * d * n


def reflect_batch(v: np.ndarray, n: np.ndarray) -> np.ndarray:
    d = np.einsum("ij,ij->i", v, n)
    return v - 2.0 * d[:, None] * n


def chart_batch(table: TableConfig, batch: BoundaryBatch):
    """Returns (q, v, n) arrays for a batch, q in the obstacle's home cell frame."""
    radii = table.radii[batch.idx]
    theta = batch.r / radii
    n = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    q = table.centers[batch.idx] + radii[:, None] * n
    ang = theta + batch.phi
    v = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return q, v, n


def chart(table: TableConfig, b: BoundaryCoord):
    q, v, _ = chart_batch(table, BoundaryBatch.of([b]))
    return q[0], v[0]


def coords_from_normal(table: TableConfig, idx: np.ndarray, n: np.ndarray, v_out: np.ndarray):
    theta = np.arctan2(n[:, 1], n[:, 0])
    theta = np.where(theta < 0.0, theta + TWO_PI, theta)
    r = table.radii[idx] * theta
    perim = table.perimeters[idx]
    r = np.where(r >= perim, r - perim, r)
    cross = n[:, 0] * v_out[:, 1] - n[:, 1] * v_out[:, 0]
    dot = np.einsum("ij,ij->i", n, v_out)
    phi = np.clip(np.arctan2(cross, dot), -math.pi / 2, math.pi / 2)
    return r, phi


def unchart(table: TableConfig, q, v) -> BoundaryCoord:
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    best = None
    for i, o in enumerate(table.obstacles):
        for mx in (-1, 0, 1):
            for my in (-1, 0, 1):
                off = q - (np.asarray(o.center) + (mx, my))
                gap = abs(math.hypot(off[0], off[1]) - o.radius)
                if best is None or gap < best[0]:
                    best = (gap, i, off)
    gap, i, off = best
    if gap > BOUNDARY_TOL:
        raise OffBoundary(f"point {q.tolist()} is {gap:.3e} away from every obstacle")
    n = off / math.hypot(off[0], off[1])
    if float(n @ v) < -BOUNDARY_TOL:
        raise OffBoundary("velocity points into the obstacle")
    r, phi = coords_from_normal(table, np.array([i]), n[None, :], v[None, :])
    return BoundaryCoord(i, float(r[0]), float(phi[0]))


def time_reversal(b: BoundaryCoord) -> BoundaryCoord:
    return BoundaryCoord(b.index, b.r, -b.phi)

# ==========================================
# Free Flights
# ==========================================
@dataclass(frozen=True)
class _Candidates:
    centers: np.ndarray
    radii2: np.ndarray
    index: np.ndarray
    shift: np.ndarray
    home: np.ndarray


@lru_cache(maxsize=32)
def _translate_candidates(table: TableConfig, reach: int) -> _Candidates:
    span = np.arange(-reach, reach + 1)
    mx, my = np.meshgrid(span, span, indexing="ij")
    shifts = np.stack([mx.ravel(), my.ravel()], axis=1).astype(np.int64)
    centers, radii2, index, shift = [], [], [], []
    for i, o in enumerate(table.obstacles):
        centers.append(np.asarray(o.center) + shifts)
        radii2.append(np.full(len(shifts), o.radius ** 2))
        index.append(np.full(len(shifts), i, dtype=np.int64))
        shift.append(shifts)
    shift = np.concatenate(shift)
    return _Candidates(np.concatenate(centers), np.concatenate(radii2),
                       np.concatenate(index), shift, ~shift.any(axis=1))


def _nearest_hits(q, v, exclude, cand: _Candidates):
    """Nearest forward intersection of each ray against the candidate circles."""
    w = cand.centers[None, :, :] - q[:, None, :]
    b = w[..., 0] * v[:, None, 0] + w[..., 1] * v[:, None, 1]
    c = w[..., 0] ** 2 + w[..., 1] ** 2 - cand.radii2[None, :]
    disc = b * b - c
    excluded = cand.home[None, :] & (cand.index[None, :] == exclude[:, None])
    eps2 = TANGENCY_EPS ** 2
    crossing = (disc > eps2) & ~excluded
    s = np.where(crossing, b - np.sqrt(np.where(crossing, disc, 0.0)), np.inf)
    s = np.where(s > 0.0, s, np.inf)
    j = np.argmin(s, axis=1)
    s_best = s[np.arange(len(q)), j]
    grazing = (np.abs(disc) <= eps2) & ~excluded & (b > 0.0) & (b < s_best[:, None])
    return j, s_best, grazing.any(axis=1)


def free_flight_batch(table: TableConfig, q: np.ndarray, v: np.ndarray,
                      start_index: np.ndarray, limit: Optional[float] = None) -> FlightBatch:
    """Vectorized free flights.

    Rays starting on obstacle start_index[k] (home translate) ignore that
    obstacle; start_index -1 marks an interior start. A hit at distance s found
    in the box of translates |m| <= K is certified once s <= K - 1.
    """
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    start_index = np.asarray(start_index, dtype=np.int64)
    n_rays = len(q)
    if limit is None:
        limit = table.horizon_bound if table.horizon_bound is not None else table.flight_cap

    shift = np.where((start_index < 0)[:, None], np.floor(q), 0.0).astype(np.int64)
    q_off = q - shift

    idx = np.full(n_rays, -1, dtype=np.int64)
    jump = np.zeros((n_rays, 2), dtype=np.int64)
    tau = np.full(n_rays, np.inf)
    normal = np.zeros((n_rays, 2))
    tangent = np.zeros(n_rays, dtype=bool)
    pending = np.arange(n_rays)

    reach = 2
    while len(pending):
        cand = _translate_candidates(table, reach)
        sub = max(1, (1 << 22) // len(cand.index))
        still = []
        for lo in range(0, len(pending), sub):
            lanes = pending[lo:lo + sub]
            j, s, graze = _nearest_hits(q_off[lanes], v[lanes], start_index[lanes], cand)
            ok = s <= reach - 1
            done = lanes[ok]
            jd = j[ok]
            idx[done] = cand.index[jd]
            jump[done] = cand.shift[jd]
            tau[done] = s[ok]
            hit_point = q_off[done] + s[ok][:, None] * v[done]
            normal[done] = (hit_point - cand.centers[jd]) / np.sqrt(cand.radii2[jd])[:, None]
            tangent[done] = graze[ok]
            still.append(lanes[~ok])
        pending = np.concatenate(still) if still else pending[:0]
        if reach - 1 >= limit:
            break
        reach *= 2

    exceeded = np.zeros(n_rays, dtype=bool)
    exceeded[pending] = True
    exceeded |= tau > limit
    return FlightBatch(idx, jump, tau, normal, tangent, exceeded)


def free_flight(table: TableConfig, q, v, start_index: Optional[int] = None) -> Flight:
    """Single free flight from q (on obstacle start_index, or interior if None)."""
    q = np.asarray(q, dtype=float)[None, :]
    v = np.asarray(v, dtype=float)[None, :]
    start = np.array([-1 if start_index is None else start_index], dtype=np.int64)
    fb = free_flight_batch(table, q, v, start)
    if fb.exceeded[0]:
        raise FlightCapExceeded(f"no collision within {table.horizon_bound or table.flight_cap}")
    if fb.tangent[0]:
        raise NumericalTangency("ray grazes an obstacle before its first collision")
    v_out = reflect_batch(v, fb.normal)
    r, phi = coords_from_normal(table, fb.idx, fb.normal, v_out)
    hit = BoundaryCoord(int(fb.idx[0]), float(r[0]), float(phi[0]))
    return Flight(hit, (int(fb.cell_jump[0, 0]), int(fb.cell_jump[0, 1])), float(fb.tau[0]))

# ==========================================
# Table Validation
# ==========================================
def closure_gaps(table: TableConfig) -> float:
    """Minimum gap between closures of distinct obstacle translates (|m| <= 2).

    Raises OverlapError if any two translates intersect.
    """
    centers, radii = table.centers, table.radii
    span = range(-2, 3)
    tau_min = math.inf
    for i in range(table.count):
        for j in range(i, table.count):
            for mx in span:
                for my in span:
                    if i == j and mx == 0 and my == 0:
                        continue
                    d = math.hypot(centers[j, 0] + mx - centers[i, 0], centers[j, 1] + my - centers[i, 1])
                    gap = d - radii[i] - radii[j]
                    if gap <= 0.0:
                        raise OverlapError(
                            f"obstacle {i} meets obstacle {j} translated by ({mx},{my})",
                            pair=[i, j], shift=[mx, my])
                    tau_min = min(tau_min, gap)
    return tau_min


def corridor_scan(table: TableConfig) -> Tuple[List[Tuple[int, int]], List[Dict[str, Any]]]:
    """Checks every rational direction that a single obstacle family cannot block.

    Projections of all translates onto the normal of direction (p, q) repeat
    with period 1/sqrt(p^2+q^2); an uncovered stretch is an open corridor.
    """
    rho_max = float(table.radii.max())
    bound = 1.0 / (2.0 * rho_max)
    checked, corridors = [], []
    top = int(math.floor(bound))
    for p in range(0, top + 1):
        for q in range(-top, top + 1):
            if (p == 0 and q != 1) or math.gcd(p, q) != 1 or math.hypot(p, q) > bound:
                continue
            length = math.hypot(p, q)
            period = 1.0 / length
            checked.append((p, q))
            proj = ((-q * table.centers[:, 0] + p * table.centers[:, 1]) / length) % period
            starts = (proj - table.radii) % period
            order = np.argsort(starts)
            starts, widths = starts[order], 2.0 * table.radii[order]
            reach = starts[0] + widths[0]
            gaps = []
            for s, w in zip(starts[1:], widths[1:]):
                if s > reach + 1e-12:
                    gaps.append(s - reach)
                reach = max(reach, s + w)
            if starts[0] + period > reach + 1e-12:
                gaps.append(starts[0] + period - reach)
            if gaps:
                corridors.append({"direction": [p, q], "widths": [float(g) for g in gaps]})
    return checked, corridors


def probe_rays(table: TableConfig, points: int, directions: int):
    """Boundary points spread in proportion to perimeter times outgoing angles."""
    share = np.maximum(1, np.round(points * table.perimeters / table.boundary_total)).astype(int)
    idx = np.concatenate([np.full(k, i, dtype=np.int64) for i, k in enumerate(share)])
    r = np.concatenate([(np.arange(k) + 0.5) / k * table.perimeters[i] for i, k in enumerate(share)])
    phi = -math.pi / 2 + (np.arange(directions) + 0.5) * math.pi / directions
    return idx, r, phi


def _probe_chunk(table: TableConfig, idx, r, phi, cap: float) -> float:
    batch = BoundaryBatch(np.repeat(idx, len(phi)), np.repeat(r, len(phi)), np.tile(phi, len(idx)))
    q, v, _ = chart_batch(table, batch)
    fb = free_flight_batch(table, q, v, batch.idx, limit=cap)
    if fb.exceeded.any():
        k = int(np.flatnonzero(fb.exceeded)[0])
        raise HorizonSuspect(f"probe flight exceeded cap {cap}",
                             start=[int(batch.idx[k]), float(batch.r[k]), float(batch.phi[k])])
    return float(fb.tau.max())


def validate_table(table: TableConfig,
                   probe_points: int = DEFAULT_PROBE_POINTS,
                   probe_directions: int = DEFAULT_PROBE_DIRECTIONS,
                   flight_cap: float = DEFAULT_FLIGHT_CAP,
                   margin: float = DEFAULT_HORIZON_MARGIN,
                   run_probe: bool = True,
                   pool=None) -> HorizonCertificate:
    """Finite-horizon certificate: overlap check, corridor scan, then a direction-grid probe."""
    if table.count < 2:
        raise TableInvalid(f"need at least 2 obstacles, got {table.count}")
    tau_min = closure_gaps(table)
    checked, corridors = corridor_scan(table)
    if corridors:
        logging.warning(f"[Geometry] open corridors: {corridors}")
        raise HorizonSuspect("table has open corridors", corridors=corridors)

    if not run_probe and table.horizon_bound is not None:
        logging.info(f"[Geometry] using declared horizon bound {table.horizon_bound}")
        return HorizonCertificate(table.horizon_bound, tau_min, None, 0.0, 0, 0,
                                  flight_cap, checked, declared=True)

    idx, r, phi = probe_rays(table, probe_points, probe_directions)
    per_chunk = max(1, CHUNK_SIZE * 16 // max(1, len(phi)))
    starts = list(range(0, len(idx), per_chunk))
    work = lambda lo: _probe_chunk(table, idx[lo:lo + per_chunk], r[lo:lo + per_chunk], phi, flight_cap)
    maxima = pool.map(work, starts) if pool is not None else [work(lo) for lo in starts]
    tau_probe = max(maxima)
    cert = HorizonCertificate(tau_probe * (1.0 + margin), tau_min, tau_probe, margin,
                              len(idx), len(phi), flight_cap, checked)
    logging.info(f"[Geometry] certificate issued: tau_max={cert.tau_max:.6f} "
                 f"(probe {len(idx)} x {len(phi)}), tau_min={tau_min:.6f}")
    return cert
