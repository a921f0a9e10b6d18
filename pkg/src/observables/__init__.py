import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from ..core import CHUNK_SIZE, as_float_or_none
from .base import (
    CellTable,
    BaseProfile,
    CellObservable,
    ProfileObservable,
    LinearCombination,
    EnvelopeObservable,
    FlowProfile,
    FlowObservable,
    CellFlowObservable,
    ConstantFlowObservable,
    encode_cells,
)
from .flight import (
    FlightIntegratedObservable,
    flight_integrate,
    integrate_segments,
    integrate_segment_adaptive,
    piece_integrals,
)
from .library import (
    ObservableContext,
    OneProfile,
    SinPhiProfile,
    CenteredSinSquareProfile,
    BumpProfile,
    MarkProfile,
    FlowOne,
    FlowVx,
    FlowBump,
    build_observable,
    build_flow_observable,
    load_tabulated_csv,
)


def evaluate(f: CellObservable, s, dynamics) -> float:
    """f(base, cell) for one extended state; zero off the support."""
    batch = dynamics.batch_of([s.base])
    return float(f.evaluate_batch(batch, np.array([s.cell], dtype=np.int64))[0])


@dataclass
class IntegralEstimate:
    value: float
    stderr: float
    samples: int
    exact: Optional[float] = None

    def to_dict(self) -> Dict:
        return {"value": self.value, "stderr": self.stderr, "samples": self.samples, "exact": self.exact}


def integral(f: CellObservable, dynamics, samples: int, rng: np.random.Generator) -> IntegralEstimate:
    """Monte Carlo of Σ_a ∫ f(x, a) dμ(x) over the support, one shared x sample per draw."""
    cells = f.support()
    if cells is None:
        raise ValueError(f"observable '{f.name}' has no finite support")
    totals = []
    for lo in range(0, samples, CHUNK_SIZE):
        n = min(CHUNK_SIZE, samples - lo)
        batch = dynamics.sample_base(rng.random((n, dynamics.uniforms_per_state)))
        grid = np.broadcast_to(cells[None, :, :], (n, len(cells), 2))
        totals.append(f.evaluate_cells(batch, grid).sum(axis=1))
    values = np.concatenate(totals) if totals else np.zeros(0)
    stderr = float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else float("nan")
    return IntegralEstimate(float(values.mean()), stderr, len(values), f.exact_integral)


def center(f: CellObservable, g0: CellObservable,
           estimate: Optional[IntegralEstimate] = None) -> LinearCombination:
    """f − I(f)/I(g0)·g0. Uses declared integrals when both are known."""
    ref = g0.exact_integral if g0.exact_integral is not None else 1.0
    if f.exact_integral is not None:
        value, stderr = f.exact_integral, f.integral_stderr
    elif estimate is not None:
        value, stderr = estimate.value, estimate.stderr
    else:
        raise ValueError(f"observable '{f.name}' needs an integral estimate to be centered")
    if value == 0.0:
        return LinearCombination([(1.0, f)], name=f.name, exact_integral=0.0, integral_stderr=stderr)
    return LinearCombination([(1.0, f), (-value / ref, g0)], name=f"{f.name}-centered",
                             exact_integral=0.0, integral_stderr=stderr / abs(ref))


@dataclass
class DecayReport:
    kappa: float
    holder_sum: float
    log_sup_sum: float
    compact: bool
    tail_slope: Optional[float] = None
    tail_bound: Optional[float] = None
    billiard_hypothesis: bool = True
    induced_hypothesis: bool = True
    shells: list = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "kappa": self.kappa, "holder_sum": self.holder_sum, "log_sup_sum": self.log_sup_sum,
            "compact": self.compact, "tail_slope": self.tail_slope, "tail_bound": self.tail_bound,
            "billiard_hypothesis": self.billiard_hypothesis, "induced_hypothesis": self.induced_hypothesis,
        }


def _weights(norm: np.ndarray, kappa: float):
    log_plus = np.log(np.maximum(norm, 1.0))
    return norm ** kappa, (1.0 + log_plus) ** (0.5 + kappa)


def _tail(radii, terms, r_cut, margin):
    """Power-law fit of the last octave of shell terms; tail by integral comparison."""
    keep = radii >= max(2, r_cut // 8)
    slope = float(np.polyfit(np.log(radii[keep]), np.log(np.maximum(terms[keep], 1e-300)), 1)[0])
    if slope < -1.0 - margin:
        return slope, float(terms[-1] * r_cut / (-slope - 1.0))
    return slope, math.inf


def decay_check(f: CellObservable, kappa: float = 0.5, r_cut: int = 256,
                margin: float = 0.05) -> DecayReport:
    """Σ_a |a|^κ ‖f(·,a)‖_η and Σ_a (1 + ln₊|a|)^{1/2+κ} ‖f(·,a)‖_∞."""
    if not isinstance(f, EnvelopeObservable):
        cells, sup, hol = f.cell_norms()
        norm = np.hypot(cells[:, 0], cells[:, 1]).astype(float)
        wk, wl = _weights(norm, kappa)
        return DecayReport(kappa, float(np.sum(wk * hol)), float(np.sum(wl * sup)), compact=True)

    radii = np.arange(1, r_cut + 1)
    holder_terms, log_terms = [], []
    centre = f.envelope(np.zeros(1))[0]
    for R in radii:
        span = np.arange(-R, R + 1)
        ring = np.concatenate([
            np.stack([span, np.full_like(span, R)], axis=1),
            np.stack([span, np.full_like(span, -R)], axis=1),
            np.stack([np.full(2 * R - 1, R), span[1:-1]], axis=1),
            np.stack([np.full(2 * R - 1, -R), span[1:-1]], axis=1),
        ])
        norm = np.hypot(ring[:, 0], ring[:, 1])
        wk, wl = _weights(norm, kappa)
        holder_terms.append(float(np.sum(wk * f.holder_envelope(norm))) * f.profile.holder_norm)
        log_terms.append(float(np.sum(wl * f.envelope(norm))) * f.profile.sup_norm)
    holder_terms = np.array(holder_terms)
    log_terms = np.array(log_terms)

    slope_h, tail_h = _tail(radii, holder_terms, r_cut, margin)
    slope_l, tail_l = _tail(radii, log_terms, r_cut, margin)
    holder_sum = float(holder_terms.sum() + tail_h)
    log_sum = float(centre * f.profile.sup_norm + log_terms.sum() + tail_l)
    report = DecayReport(kappa, holder_sum, log_sum, compact=False,
                         tail_slope=max(slope_h, slope_l),
                         tail_bound=as_float_or_none(tail_h + tail_l),
                         billiard_hypothesis=math.isfinite(holder_sum),
                         induced_hypothesis=math.isfinite(log_sum),
                         shells=[{"R": int(R), "holder": float(h), "log_sup": float(l)}
                                 for R, h, l in zip(radii, holder_terms, log_terms)])
    if not (report.billiard_hypothesis and report.induced_hypothesis):
        logging.warning(f"[Observables] {f.name}: decay hypotheses fail "
                        f"(tail slopes {slope_h:.3f}, {slope_l:.3f})")
    return report
