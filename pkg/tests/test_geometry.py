import math

import numpy as np
import pytest

from src.core import FlightCapExceeded, HorizonSuspect, NotIncoming, OffBoundary, OverlapError, TableInvalid
from src.geometry import (
    BoundaryBatch,
    BoundaryCoord,
    TableConfig,
    chart,
    closure_gaps,
    corridor_scan,
    free_flight,
    reflect,
    time_reversal,
    unchart,
    validate_table,
)


def test_table_measures(table):
    assert table.count == 2
    assert table.free_area == pytest.approx(1.0 - 0.2 * math.pi)
    assert table.boundary_total == pytest.approx(2.0 * math.pi * 0.6)
    assert table.mean_free_path == pytest.approx((1.0 - 0.2 * math.pi) / 1.2)


@pytest.mark.parametrize("triples", [
    [(0.0, 0.0, 0.0), (0.5, 0.5, 0.2)],
    [(0.0, 0.0, 0.3), (1.2, 0.5, 0.2)],
])
def test_bad_obstacles_rejected(triples):
    with pytest.raises(TableInvalid):
        TableConfig.from_triples(triples)


def test_single_obstacle_not_a_table():
    with pytest.raises(TableInvalid):
        validate_table(TableConfig.from_triples([(0.0, 0.0, 0.45)]), 8, 8)


def test_overlap_detected():
    table = TableConfig.from_triples([(0.0, 0.0, 0.4), (0.5, 0.0, 0.2)])
    with pytest.raises(OverlapError) as info:
        closure_gaps(table)
    assert info.value.details["pair"] == [0, 1]


def test_closure_gap_is_nearest_pair(table):
    assert closure_gaps(table) == pytest.approx(math.sqrt(0.5) - 0.6)


def test_open_corridor_rejected():
    table = TableConfig.from_triples([(0.0, 0.0, 0.1), (0.5, 0.5, 0.1)])
    checked, corridors = corridor_scan(table)
    assert (1, 0) in checked
    assert any(c["direction"] == [1, 0] for c in corridors)
    with pytest.raises(HorizonSuspect):
        validate_table(table, 8, 8)


def test_certificate_covers_probe(table):
    cert = validate_table(table, probe_points=40, probe_directions=40)
    assert {(1, 0), (0, 1)} <= set(cert.corridors_checked)
    assert cert.tau_probe_max >= cert.tau_min > 0
    assert cert.tau_max == pytest.approx(cert.tau_probe_max * (1.0 + cert.margin))
    assert cert.heuristic and not cert.declared


def test_declared_horizon_skips_probe(table):
    cert = validate_table(table.with_horizon(2.5), run_probe=False)
    assert cert.declared
    assert cert.tau_max == 2.5
    assert cert.tau_probe_max is None


def test_reflect_rejects_outgoing_velocity():
    assert np.allclose(reflect([0.0, -1.0], [0.0, 1.0]), [0.0, 1.0])
    with pytest.raises(NotIncoming):
        reflect([0.0, 1.0], [0.0, 1.0])


def test_head_on_flight(bounded_table):
    flight = free_flight(bounded_table, [0.5, 0.0], [0.0, 1.0])
    assert flight.hit.index == 1
    assert flight.cell_jump == (0, 0)
    assert flight.tau == pytest.approx(0.3)
    assert flight.hit.r == pytest.approx(0.3 * math.pi)
    assert flight.hit.phi == pytest.approx(0.0, abs=1e-12)


def test_flight_through_corridor_exceeds_cap():
    table = TableConfig.from_triples([(0.0, 0.0, 0.1), (0.5, 0.5, 0.1)], flight_cap=10.0)
    with pytest.raises(FlightCapExceeded):
        free_flight(table, [0.25, 0.25], [1.0, 0.0])


def test_chart_and_unchart_agree(table):
    b = BoundaryCoord(0, 0.7, 0.4)
    q, v = chart(table, b)
    back = unchart(table, q, v)
    assert back.index == 0
    assert back.r == pytest.approx(0.7)
    assert back.phi == pytest.approx(0.4)


def test_unchart_off_boundary(table):
    with pytest.raises(OffBoundary):
        unchart(table, [0.7, 0.1], [1.0, 0.0])


def test_time_reversal_reverses_the_map(billiard, rng):
    batch = billiard.sample_base(rng.random((200, 3)))
    fwd = billiard.advance(batch)
    reversed_images = BoundaryBatch(fwd.batch.idx, fwd.batch.r.copy(), -fwd.batch.phi)
    back = billiard.advance(reversed_images)
    ok = ~(fwd.failed | back.failed)
    radii = billiard.table.radii
    assert np.array_equal(back.batch.idx[ok], batch.idx[ok])
    angle_gap = (back.batch.r - batch.r) / radii[batch.idx]
    assert np.allclose(np.cos(angle_gap[ok]), 1.0, atol=1e-9)
    assert np.allclose(back.batch.phi[ok], -batch.phi[ok], atol=1e-8)
    assert np.array_equal(back.F[ok], -fwd.F[ok])
    b = BoundaryCoord(1, 0.2, 0.3)
    assert time_reversal(time_reversal(b)) == b
