"""Built-in observables, selectable by name from the run configuration."""
import csv
import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional

import numpy as np

from ..core import ConfigInvalid
from .base import (
    BaseProfile,
    CellTable,
    ProfileObservable,
    EnvelopeObservable,
    FlowProfile,
    CellFlowObservable,
    ConstantFlowObservable,
)
from .flight import FlightIntegratedObservable

CELL0 = {(0, 0): 1.0}
DIPOLE = {(0, 0): 1.0, (1, 0): -1.0}


@dataclass
class ObservableContext:
    """What a builder may need: the table (billiard runs) or the chain (oracle runs)."""
    table: Any = None
    chain: Any = None
    quadrature_order: int = 8

# ==========================================
# Base Profiles
# ==========================================
class OneProfile(BaseProfile):
    name = "one"
    exact_mean = 1.0
    holder_norm = 1.0

    def __call__(self, batch):
        return np.ones(len(batch))


class SinPhiProfile(BaseProfile):
    name = "sin_phi"
    exact_mean = 0.0
    holder_norm = 2.0

    def __call__(self, batch):
        return np.sin(batch.phi)


class CenteredSinSquareProfile(BaseProfile):
    """sin²φ − 1/3; the cosφ/2 density gives sin²φ mean 1/3."""
    name = "sin_sq_centered"
    exact_mean = 0.0
    sup_norm = 2.0 / 3.0
    holder_norm = 5.0 / 3.0

    def __call__(self, batch):
        return np.sin(batch.phi) ** 2 - 1.0 / 3.0


class BumpProfile(BaseProfile):
    """Raised cosine in the normalized arclength s = r / |∂O_i|, periodic in s."""
    name = "bump"

    def __init__(self, table, center: float = 0.25, half_width: float = 0.1):
        if not 0.0 < half_width <= 0.5:
            raise ConfigInvalid("observables.bump.half_width: must lie in (0, 0.5]")
        self.table = table
        self.center = float(center) % 1.0
        self.half_width = float(half_width)
        self.exact_mean = self.half_width
        self.holder_norm = 1.0 + math.pi / (2.0 * self.half_width * float(table.perimeters.min()))

    def __call__(self, batch):
        s = batch.r / self.table.perimeters[batch.idx]
        d = np.abs((s - self.center + 0.5) % 1.0 - 0.5)
        inside = d < self.half_width
        return np.where(inside, 0.5 * (1.0 + np.cos(math.pi * d / self.half_width)), 0.0)


class MarkProfile(BaseProfile):
    """w(state) on a finite chain."""
    name = "mark"

    def __init__(self, marks, pi):
        self.marks = np.asarray(marks, dtype=float)
        self.exact_mean = float(np.asarray(pi) @ self.marks)
        self.sup_norm = float(np.abs(self.marks).max())
        self.holder_norm = self.sup_norm

    def __call__(self, batch):
        return self.marks[batch.state]

# ==========================================
# Flow Profiles
# ==========================================
class FlowOne(FlowProfile):
    name = "one"

    def __init__(self, cell_volume: float):
        self.cell_mean = float(cell_volume)

    def __call__(self, local, v):
        return np.ones(np.asarray(local).shape[:-1])


class FlowVx(FlowProfile):
    name = "vx"
    cell_mean = 0.0

    def __call__(self, local, v):
        return np.asarray(v)[..., 0]


class FlowBump(FlowProfile):
    """(16 y1(1−y1) y2(1−y2))²; degree 4 per axis, so order-8 Gauss–Legendre is exact per piece."""
    name = "bump"

    def __call__(self, local, v):
        y = np.asarray(local)
        return (16.0 * y[..., 0] * (1.0 - y[..., 0]) * y[..., 1] * (1.0 - y[..., 1])) ** 2

# ==========================================
# Tabulated coefficients
# ==========================================
def load_tabulated_csv(path: str) -> CellTable:
    """CSV with header cell_x, cell_y, coefficient."""
    coeffs: Dict = {}
    try:
        with open(path, newline="", encoding="utf-8") as f:
            for line, row in enumerate(csv.DictReader(f), start=2):
                try:
                    key = (int(row["cell_x"]), int(row["cell_y"]))
                    coeffs[key] = coeffs.get(key, 0.0) + float(row["coefficient"])
                except (KeyError, TypeError, ValueError) as e:
                    raise ConfigInvalid(f"observables.tabulated.path: line {line}: {e}") from e
    except OSError as e:
        logging.error(f"[Observables] 无法读取系数表: {e}")
        raise ConfigInvalid(f"observables.tabulated.path: {e}") from e
    return CellTable(coeffs)

# ==========================================
# Registry
# ==========================================
def _table(ctx: ObservableContext, name: str):
    if ctx.table is None:
        raise ConfigInvalid(f"observables.{name}: needs a billiard table")
    return ctx.table


def _profile(kind: str, params: Dict, ctx: ObservableContext) -> BaseProfile:
    if kind == "one":
        return OneProfile()
    if kind == "sin_phi":
        _table(ctx, kind)
        return SinPhiProfile()
    if kind == "sin_sq_centered":
        _table(ctx, kind)
        return CenteredSinSquareProfile()
    if kind == "bump":
        return BumpProfile(_table(ctx, kind), params.get("center", 0.25), params.get("half_width", 0.1))
    if kind == "mark":
        if ctx.chain is None:
            raise ConfigInvalid("observables.mark: needs an oracle chain")
        return MarkProfile(ctx.chain.w, ctx.chain.pi)
    raise ConfigInvalid(f"observables.profile: unknown profile '{kind}'")


def _cell0(kind):
    def build(params, ctx):
        return ProfileObservable(CellTable(CELL0), _profile(kind, params, ctx), name=params.get("name", kind))
    return build


def _envelope(params, ctx):
    kind = params.get("decay", "power")
    if kind == "power":
        p = float(params.get("exponent", 3.0))
        env = lambda norm: (1.0 + norm) ** (-p)
    elif kind == "log":
        env = lambda norm: 1.0 / np.log(2.0 + norm)
    else:
        raise ConfigInvalid(f"observables.envelope.decay: unknown '{kind}'")
    return EnvelopeObservable(env, OneProfile(), int(params.get("truncation", 32)),
                              name=params.get("name", f"envelope-{kind}"))


def _tabulated(params, ctx):
    if "path" not in params:
        raise ConfigInvalid("observables.tabulated.path: required")
    return ProfileObservable(load_tabulated_csv(params["path"]),
                             _profile(params.get("profile", "one"), params, ctx),
                             name=params.get("name", "tabulated"))


def _flight(params, ctx):
    inner = params.get("flow")
    if not isinstance(inner, dict):
        raise ConfigInvalid("observables.flight.flow: required")
    theta = build_flow_observable(inner, ctx)
    return FlightIntegratedObservable(theta, _table(ctx, "flight"), ctx.quadrature_order)


MAP_OBSERVABLES: Dict[str, Callable[[Dict, ObservableContext], Any]] = {
    "g0": lambda p, c: ProfileObservable(CellTable(CELL0), OneProfile(), name=p.get("name", "g0")),
    "cell_indicator": lambda p, c: ProfileObservable(
        CellTable({tuple(p.get("cell", (0, 0))): 1.0}), OneProfile(), name=p.get("name", "cell_indicator")),
    "dipole": lambda p, c: ProfileObservable(CellTable(DIPOLE), OneProfile(), name=p.get("name", "dipole")),
    "sin_phi": _cell0("sin_phi"),
    "sin_sq_centered": _cell0("sin_sq_centered"),
    "bump": _cell0("bump"),
    "mark": _cell0("mark"),
    "tabulated": _tabulated,
    "envelope": _envelope,
    "flight": _flight,
}


def _flow_one(ctx):
    return FlowOne(_table(ctx, "flow").mean_free_path)


FLOW_OBSERVABLES: Dict[str, Callable[[Dict, ObservableContext], Any]] = {
    "cell0_indicator": lambda p, c: CellFlowObservable(CellTable(CELL0), _flow_one(c),
                                                       name=p.get("name", "cell0_indicator")),
    "dipole": lambda p, c: CellFlowObservable(CellTable(DIPOLE), _flow_one(c), name=p.get("name", "flow_dipole")),
    "vx_cell0": lambda p, c: CellFlowObservable(CellTable(CELL0), FlowVx(), name=p.get("name", "vx_cell0")),
    "bump": lambda p, c: CellFlowObservable(CellTable(CELL0), FlowBump(), name=p.get("name", "flow_bump")),
    "constant": lambda p, c: ConstantFlowObservable(float(p.get("value", 1.0)), name=p.get("name", "constant")),
}


def build_observable(spec: Dict, ctx: ObservableContext):
    kind = spec.get("kind")
    if kind not in MAP_OBSERVABLES:
        raise ConfigInvalid(f"observables.kind: unknown observable '{kind}'")
    return MAP_OBSERVABLES[kind](spec, ctx)


def build_flow_observable(spec: Dict, ctx: ObservableContext):
    kind = spec.get("kind")
    if kind not in FLOW_OBSERVABLES:
        raise ConfigInvalid(f"flow_observables.kind: unknown flow observable '{kind}'")
    return FLOW_OBSERVABLES[kind](spec, ctx)
