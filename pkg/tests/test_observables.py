import math

import numpy as np
import pytest

from src.core import ConfigInvalid
from src.dynamics import ExtendedState
from src.geometry import BoundaryCoord, free_flight, chart
from src.observables import (
    ConstantFlowObservable,
    FlightIntegratedObservable,
    build_flow_observable,
    build_observable,
    center,
    decay_check,
    evaluate,
    flight_integrate,
    integral,
    load_tabulated_csv,
)


def test_g0_and_dipole_integrals_are_exact(billiard, context, rng):
    g0 = build_observable({"kind": "g0"}, context)
    dipole = build_observable({"kind": "dipole"}, context)
    assert g0.exact_integral == 1.0
    assert dipole.exact_integral == 0.0
    assert integral(g0, billiard, 5000, rng).value == pytest.approx(1.0)
    assert integral(dipole, billiard, 5000, rng).value == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("spec, expected", [
    ({"kind": "sin_phi"}, 0.0),
    ({"kind": "sin_sq_centered"}, 0.0),
    ({"kind": "bump", "center": 0.3, "half_width": 0.2}, 0.2),
])
def test_profile_means_match_declared(billiard, context, rng, spec, expected):
    f = build_observable(spec, context)
    est = integral(f, billiard, 100000, rng)
    assert f.exact_integral == pytest.approx(expected)
    assert abs(est.value - expected) <= 4.0 * est.stderr


def test_centering_removes_the_mass(billiard, context, rng):
    g0 = build_observable({"kind": "g0"}, context)
    f = build_observable({"kind": "cell_indicator", "cell": [2, 3]}, context)
    c = center(f, g0)
    assert c.exact_integral == 0.0
    assert integral(c, billiard, 2000, rng).value == pytest.approx(0.0, abs=1e-12)
    batch = billiard.sample_base(rng.random((4, 3)))
    values = c.evaluate_cells(batch, np.array([[[2, 3], [0, 0], [5, 5]]] * 4))
    assert np.allclose(values, [[1.0, -1.0, 0.0]] * 4)

    dipole = build_observable({"kind": "dipole"}, context)
    assert center(dipole, g0).terms == [(1.0, dipole)]


def test_decay_of_compact_observable(context):
    report = decay_check(build_observable({"kind": "dipole"}, context), kappa=0.5)
    assert report.compact
    assert report.holder_sum == pytest.approx(1.0)
    assert report.log_sup_sum == pytest.approx(2.0)


def test_decay_of_envelopes(context):
    fast = decay_check(build_observable({"kind": "envelope", "decay": "power", "exponent": 4}, context),
                       r_cut=64)
    assert fast.billiard_hypothesis and fast.induced_hypothesis
    slow = decay_check(build_observable({"kind": "envelope", "decay": "log"}, context), r_cut=64)
    assert not slow.billiard_hypothesis
    assert not slow.induced_hypothesis


def test_unknown_kinds_rejected(context):
    with pytest.raises(ConfigInvalid):
        build_observable({"kind": "nope"}, context)
    with pytest.raises(ConfigInvalid):
        build_observable({"kind": "mark"}, context)
    with pytest.raises(ConfigInvalid):
        build_flow_observable({"kind": "nope"}, context)


def test_tabulated_coefficients(tmp_path, context):
    path = tmp_path / "coeffs.csv"
    path.write_text("cell_x,cell_y,coefficient\n0,0,2.0\n1,0,-2.0\n0,0,0.5\n", encoding="utf-8")
    table = load_tabulated_csv(str(path))
    assert dict(table.items()) == {(0, 0): 2.5, (1, 0): -2.0}
    f = build_observable({"kind": "tabulated", "path": str(path)}, context)
    assert f.exact_integral == pytest.approx(0.5)

    bad = tmp_path / "bad.csv"
    bad.write_text("cell_x,cell_y,coefficient\n0,zero,1\n", encoding="utf-8")
    with pytest.raises(ConfigInvalid):
        load_tabulated_csv(str(bad))


def test_flight_integral_of_constant_is_flight_time(bounded_table):
    x = BoundaryCoord(0, 0.4 * math.pi / 4.0, 0.0)
    q, v = chart(bounded_table, x)
    tau = free_flight(bounded_table, q, v, start_index=0).tau
    assert tau == pytest.approx(math.sqrt(0.5) - 0.6)
    assert flight_integrate(ConstantFlowObservable(1.0), x, (0, 0), bounded_table) == pytest.approx(tau)


def test_flight_observable_has_mean_free_path_mass(billiard, context, rng):
    psi = build_flow_observable({"kind": "cell0_indicator"}, context)
    G = FlightIntegratedObservable(psi, billiard.table)
    assert G.exact_integral == pytest.approx(billiard.table.mean_free_path)
    est = integral(G, billiard, 40000, rng)
    assert abs(est.value - billiard.table.mean_free_path) <= 4.0 * est.stderr

    vx = build_flow_observable({"kind": "vx_cell0"}, context)
    assert vx.exact_flow_integral == 0.0


def test_evaluate_is_linear_and_local(billiard, context, g0):
    bump = build_observable({"kind": "bump", "center": 0.3, "half_width": 0.2}, context)
    centered = center(bump, g0)
    for cell in [(0, 0), (2, -1)]:
        s = ExtendedState(BoundaryCoord(0, 0.35, 0.2), cell)
        expected = evaluate(bump, s, billiard) - 0.2 * evaluate(g0, s, billiard)
        assert evaluate(centered, s, billiard) == pytest.approx(expected, abs=1e-12)
    off = ExtendedState(BoundaryCoord(1, 0.1, -0.4), (3, 3))
    assert evaluate(g0, off, billiard) == 0.0
    assert evaluate(g0, ExtendedState(off.base, (0, 0)), billiard) == 1.0
