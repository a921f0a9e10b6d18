import math

import numpy as np
import pytest

from src.core import ConfigInvalid
from src.dynamics import (
    TRAJECTORY_COLUMNS,
    ExtendedState,
    FlowState,
    Walk,
    birkhoff_discrete,
    birkhoff_flow,
    birkhoff_interpolated,
    induced_excursions,
    induced_return,
)
from src.geometry import BoundaryCoord
from src.observables import CellTable, ConstantFlowObservable, OneProfile, ProfileObservable
from src.utils.rng import stream


def test_invariant_sampler_marginals(billiard, rng):
    batch = billiard.sample_base(rng.random((200000, 3)))
    assert np.mean(batch.idx == 0) == pytest.approx(2.0 / 3.0, abs=0.005)
    assert np.mean(np.sin(batch.phi)) == pytest.approx(0.0, abs=0.005)
    assert np.mean(np.sin(batch.phi) ** 2) == pytest.approx(1.0 / 3.0, abs=0.005)
    s = batch.r / billiard.table.perimeters[batch.idx]
    assert s.min() >= 0.0 and s.max() < 1.0
    assert np.mean(s) == pytest.approx(0.5, abs=0.005)


def test_map_preserves_the_sampled_law(billiard):
    out = billiard.invariance_check(20000, seed=11, bins=10)
    assert out["samples"] + out["discarded"] == 20000
    for key in ("p_obstacle", "p_r", "p_phi", "p_joint"):
        assert out[key] > 1e-4


def test_step_is_bounded_by_flight_length(billiard, rng):
    res = billiard.advance(billiard.sample_base(rng.random((5000, 3))))
    reach = np.abs(res.F).max(axis=1)
    assert np.all(reach <= np.ceil(res.tau) + 2)
    assert np.all(res.tau > 0) and np.all(res.tau <= billiard.table.horizon_bound)


def test_extension_is_translation_equivariant(billiard):
    x = BoundaryCoord(0, 0.9, 0.2)
    here = billiard.step_extension(ExtendedState(x, (0, 0)))
    there = billiard.step_extension(ExtendedState(x, (7, -3)))
    assert here.base == there.base
    assert (there.cell[0] - here.cell[0], there.cell[1] - here.cell[1]) == (7, -3)


def test_trajectory_cells_follow_steps(billiard, tmp_path):
    s0 = ExtendedState(BoundaryCoord(1, 0.25, -0.3), (0, 0))
    rec = billiard.record_trajectory(s0, 40, seed_material={"seed": 1})
    assert list(rec.step) == list(range(40))
    assert np.array_equal(rec.cell[1:], rec.cell[:-1] + rec.F[:-1])
    assert rec.total_time == pytest.approx(float(rec.tau.sum()))

    path = tmp_path / "trajectory.csv"
    rec.to_csv(str(path))
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == ",".join(TRAJECTORY_COLUMNS)
    assert len(lines) == 41

    rec.to_npz(str(tmp_path / "trajectory.npz"))
    with np.load(str(tmp_path / "trajectory.npz")) as data:
        assert np.array_equal(data["cell"], rec.cell)
        assert np.array_equal(data["F"], rec.F)

    strided = billiard.record_trajectory(s0, 40, stride=10)
    assert list(strided.step) == [0, 10, 20, 30]
    assert np.array_equal(strided.cell, rec.cell[::10])


def test_birkhoff_sum_counts_visits_to_cell0(billiard, g0):
    s0 = ExtendedState(BoundaryCoord(0, 0.4, 0.1), (0, 0))
    rec = billiard.record_trajectory(s0, 60)
    visits = ~rec.cell.any(axis=1)
    sums = birkhoff_discrete(billiard, s0, g0, 60, checkpoints=[0, 10, 60])
    assert sums[0] == 0.0
    assert sums[10] == pytest.approx(float(visits[:10].sum()))
    assert sums[60] == pytest.approx(float(visits.sum()))

    half = birkhoff_interpolated(billiard, s0, g0, 2.5)
    assert half == pytest.approx(float(visits[0] + visits[1] + 0.5 * visits[2]))


def test_negative_time_rejected(billiard, g0):
    s0 = ExtendedState(BoundaryCoord(0, 0.4, 0.1), (0, 0))
    with pytest.raises(ConfigInvalid):
        birkhoff_discrete(billiard, s0, g0, -1)


def test_flow_integral_of_constant_is_elapsed_time(billiard):
    s0 = FlowState(ExtendedState(BoundaryCoord(0, 0.4, 0.1), (0, 0)), 0.0)
    assert birkhoff_flow(billiard, s0, ConstantFlowObservable(1.0), 3.7) == pytest.approx(3.7)
    late = FlowState(s0.last_collision, 0.05)
    assert birkhoff_flow(billiard, late, ConstantFlowObservable(2.0), 1.5) == pytest.approx(3.0)
    assert birkhoff_flow(billiard, s0, ConstantFlowObservable(1.0), 0.0) == 0.0


def test_induced_return_sums_one_visit(billiard, g0):
    # normal flight from the big disk at 45 degrees lands on the small disk of the same cell
    s0 = ExtendedState(BoundaryCoord(0, 0.4 * math.pi / 4.0, 0.0), (0, 0))
    res = induced_return(billiard, s0, {"g0": g0})
    assert res.return_time == 1
    assert res.state.base.index == 1
    assert res.state.cell == (0, 0)
    assert res.sums["g0"] == 1.0
    with pytest.raises(ConfigInvalid):
        induced_return(billiard, ExtendedState(s0.base, (1, 0)), {"g0": g0})


def test_excursions_partition_the_orbit(lazy_dynamics):
    g0 = ProfileObservable(CellTable({(0, 0): 1.0}), OneProfile(), name="g0")
    walk = Walk(lazy_dynamics, np.arange(4096), seed=5)
    sample = induced_excursions(walk, {"g0": g0}, target=2000)
    assert sample.count >= 2000
    assert np.all(sample.sums["g0"] == 1.0)
    assert np.all(sample.lengths >= 1)
    pieces = sample.segments()
    assert sum(s.stop - s.start for s in pieces) == sample.count
    assert np.all(np.diff(sample.walker) >= 0)


def test_streams_are_reproducible():
    a = stream(42, 1, 7).random(5)
    b = stream(42, 1, 7).random(5)
    c = stream(42, 1, 8).random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_scalar_map_agrees_with_batch(billiard, rng):
    for _ in range(20):
        x = billiard.sample_invariant(rng)
        assert x.index in (0, 1)
        assert abs(x.phi) < math.pi / 2
        res = billiard.advance(billiard.batch_of([x]))
        if res.failed[0]:
            continue
        image, F, tau = billiard.billiard_map(x)
        assert image == res.batch.item(0)
        assert F == (int(res.F[0][0]), int(res.F[0][1]))
        assert tau == pytest.approx(float(res.tau[0]))
        assert billiard.step_extension(ExtendedState(x, (1, 1))).cell == (1 + F[0], 1 + F[1])
