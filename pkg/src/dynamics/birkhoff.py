"""Birkhoff sums in map time, interpolated time and flow time, and excursions between returns to cell 0."""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..core import GL_ORDER, RETURN_CAP, ReturnCapExceeded, NumericalTangency, ConfigInvalid
from ..observables.flight import integrate_segments
from ..utils.stats import CompensatedSum
from .base import DynamicsStrategy, ExtendedState, FlowState, Walk


def _single(dynamics: DynamicsStrategy, s0: ExtendedState, rng=None) -> Walk:
    return Walk.from_states(dynamics, dynamics.batch_of([s0.base]), [s0.cell], rng)

# ==========================================
# Map Time
# ==========================================
def birkhoff_sums(walk: Walk, observables: Dict[str, object], times: Sequence[float]) -> Dict[str, np.ndarray]:
    """Interpolated sums S̃_t f = S_⌊t⌋ f + (t − ⌊t⌋) f∘T̃^⌊t⌋ at increasing times.

    Returns name -> (lanes, len(times)). Integer times give the plain sums.
    """
    times = np.asarray(times, dtype=float)
    if len(times) and (times[0] < 0 or np.any(np.diff(times) < 0)):
        raise ConfigInvalid("ensemble.times: must be non-negative and increasing")
    acc = {name: CompensatedSum(len(walk)) for name in observables}
    out = {name: np.zeros((len(walk), len(times))) for name in observables}
    k = 0
    for j, t in enumerate(times):
        whole = int(math.floor(t))
        while k < whole:
            for name, f in observables.items():
                acc[name].add(f.evaluate_batch(walk.batch, walk.cells))
            walk.step()
            k += 1
        frac = t - whole
        for name, f in observables.items():
            extra = frac * f.evaluate_batch(walk.batch, walk.cells) if frac > 0.0 else 0.0
            out[name][:, j] = acc[name].total + extra
    return out


def birkhoff_discrete(dynamics: DynamicsStrategy, s0: ExtendedState, f, n: int,
                      checkpoints: Optional[Sequence[int]] = None, rng=None) -> Dict[int, float]:
    """S_k f(s0) at each checkpoint k (default: n only)."""
    if n < 0:
        raise ConfigInvalid("n: must be non-negative")
    points = sorted(set(int(c) for c in (checkpoints or [n]) if 0 <= c <= n))
    walk = _single(dynamics, s0, rng)
    sums = birkhoff_sums(walk, {"f": f}, points)["f"][0]
    if walk.failed[0]:
        raise NumericalTangency("trajectory hit a tangency")
    return dict(zip(points, (float(v) for v in sums)))


def birkhoff_interpolated(dynamics: DynamicsStrategy, s0: ExtendedState, f, t: float, rng=None) -> float:
    if t < 0:
        raise ConfigInvalid("t: must be non-negative")
    walk = _single(dynamics, s0, rng)
    return float(birkhoff_sums(walk, {"f": f}, [t])["f"][0, 0])

# ==========================================
# Flow Time
# ==========================================
def flow_sums(walk: Walk, thetas: Dict[str, object], times: Sequence[float],
              order: int = GL_ORDER, offset: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    """∫_0^t θ∘Ỹ_s ds per lane at increasing flow times, flight by flight.

    offset is the time already spent on the first flight (FlowState.elapsed_since).
    """
    if not walk.dynamics.has_flow:
        raise ConfigInvalid(f"dynamics '{walk.dynamics.name}' has no flow")
    times = np.asarray(times, dtype=float)
    lanes = len(walk)
    skip = np.zeros(lanes) if offset is None else np.asarray(offset, dtype=float).copy()
    clock = np.zeros(lanes)
    ptr = np.zeros(lanes, dtype=np.int64)
    acc = {name: CompensatedSum(lanes) for name in thetas}
    out = {name: np.zeros((lanes, len(times))) for name in thetas}

    while np.any(ptr < len(times)):
        cells = walk.cells.copy()
        res = walk.step()
        v = res.velocity
        p0 = cells + res.origin + skip[:, None] * v
        length = res.tau - skip
        skip[:] = 0.0
        end = clock + length
        # grid times falling inside this flight
        while True:
            pending = ptr < len(times)
            t_next = np.where(pending, times[np.minimum(ptr, len(times) - 1)], np.inf)
            hit = pending & (t_next <= end)
            if not hit.any():
                break
            sel = np.flatnonzero(hit)
            partial = t_next[sel] - clock[sel]
            for name, theta in thetas.items():
                val = integrate_segments(theta, p0[sel], v[sel], partial, order)
                out[name][sel, ptr[sel]] = acc[name].total[sel] + val
            ptr[sel] += 1
        for name, theta in thetas.items():
            acc[name].add(integrate_segments(theta, p0, v, length, order))
        clock = end
    return out


def birkhoff_flow(dynamics: DynamicsStrategy, s0: FlowState, theta, t: float,
                  order: int = GL_ORDER) -> float:
    if t < 0:
        raise ConfigInvalid("t: must be non-negative")
    if t == 0:
        return 0.0
    walk = _single(dynamics, s0.last_collision)
    val = flow_sums(walk, {"theta": theta}, [t], order, offset=np.array([s0.elapsed_since]))
    if walk.failed[0]:
        raise NumericalTangency("trajectory hit a tangency")
    return float(val["theta"][0, 0])

# ==========================================
# Returns to Cell 0
# ==========================================
@dataclass
class ReturnResult:
    state: ExtendedState
    return_time: int
    sums: Dict[str, float]


def induced_return(dynamics: DynamicsStrategy, s: ExtendedState, observables: Dict[str, object],
                   cap: int = RETURN_CAP, rng=None) -> ReturnResult:
    """Iterates T̃ from cell 0 until the cell is 0 again, summing f along the way."""
    if tuple(s.cell) != (0, 0):
        raise ConfigInvalid("induced_return: starting cell must be (0, 0)")
    walk = _single(dynamics, s, rng)
    sums = {name: 0.0 for name in observables}
    for k in range(1, cap + 1):
        for name, f in observables.items():
            sums[name] += float(f.evaluate_batch(walk.batch, walk.cells)[0])
        walk.step()
        if walk.failed[0]:
            raise NumericalTangency("trajectory hit a tangency during an excursion")
        if not walk.cells[0].any():
            base = dynamics.item(walk.batch, 0)
            return ReturnResult(ExtendedState(base, (0, 0)), k, sums)
    logging.warning(f"[Induced] return cap {cap} reached")
    raise ReturnCapExceeded(f"no return to cell 0 within {cap} steps", cap=cap)


@dataclass
class ExcursionSample:
    """Consecutive excursion sums per walker, concatenated in (walker, order) order."""
    walker: np.ndarray
    lengths: np.ndarray
    sums: Dict[str, np.ndarray]
    capped: int = 0
    failed: int = 0
    truncated: int = 0
    walkers: int = 0

    @property
    def count(self) -> int:
        return len(self.walker)

    @property
    def cap_rate(self) -> float:
        total = self.count + self.capped
        return self.capped / total if total else 0.0

    def segments(self) -> List[slice]:
        """Slices of consecutive excursions belonging to one walker."""
        if not self.count:
            return []
        cuts = np.flatnonzero(np.diff(self.walker)) + 1
        bounds = np.concatenate([[0], cuts, [self.count]])
        return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def induced_excursions(walk: Walk, observables: Dict[str, object], target: int,
                       cap: int = RETURN_CAP, max_steps: Optional[int] = None,
                       max_cap_rate: float = 0.5) -> ExcursionSample:
    """Runs all lanes of a cell-0 walk and cuts each orbit at its returns to cell 0.

    An excursion reaching `cap` steps is discarded and its walker retired; so is a
    walker that meets a tangency. Stops once `target` excursions are complete.
    """
    if walk.cells.any():
        raise ConfigInvalid("induced_excursions: walkers must start in cell 0")
    walkers = len(walk)
    lane_id = np.arange(walkers)
    acc = {name: CompensatedSum(walkers) for name in observables}
    length = np.zeros(walkers, dtype=np.int64)
    rec_walker, rec_len = [], []
    rec_sums = {name: [] for name in observables}
    capped = failed = done = steps = 0

    while len(lane_id) and done < target and (max_steps is None or steps < max_steps):
        for name, f in observables.items():
            acc[name].add(f.evaluate_batch(walk.batch, walk.cells))
        walk.step()
        steps += 1
        length += 1
        back = ~walk.cells.any(axis=1) & ~walk.failed
        if back.any():
            sel = np.flatnonzero(back)
            rec_walker.append(lane_id[sel])
            rec_len.append(length[sel].copy())
            for name in observables:
                rec_sums[name].append(acc[name].total[sel].copy())
                acc[name].reset(sel)
            length[sel] = 0
            done += len(sel)
        over = length >= cap
        retire = over | walk.failed
        if retire.any():
            capped += int(over.sum())
            failed += int((walk.failed & ~over).sum())
            if over.any():
                logging.warning(f"[Induced] {int(over.sum())} excursions reached the return cap {cap}")
            keep = ~retire
            walk.keep(keep)
            lane_id = lane_id[keep]
            length = length[keep]
            acc = {name: a.take(keep) for name, a in acc.items()}

    truncated = int(np.count_nonzero(length)) if len(lane_id) else 0
    walker = np.concatenate(rec_walker) if rec_walker else np.zeros(0, dtype=np.int64)
    order = np.argsort(walker, kind="stable")
    sample = ExcursionSample(
        walker=walker[order],
        lengths=(np.concatenate(rec_len) if rec_len else np.zeros(0, dtype=np.int64))[order],
        sums={name: (np.concatenate(v) if v else np.zeros(0))[order] for name, v in rec_sums.items()},
        capped=capped, failed=failed, truncated=truncated, walkers=walkers)
    if failed:
        logging.warning(f"[Induced] retired {failed} walkers after a tangency")
    if sample.cap_rate > max_cap_rate:
        raise ReturnCapExceeded(f"cap rate {sample.cap_rate:.3f} above {max_cap_rate}",
                                capped=capped, completed=sample.count)
    return sample
