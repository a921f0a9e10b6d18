import math

import numpy as np
import pytest

from src.core import DegenerateMatrix, NotCentered, WindowTooSmall
from src.estimators import (
    collect_steps,
    diffusion_matrix,
    excursion_variance,
    green_kubo_variance,
    induced_variance,
    lagged_products,
    local_limit_profile,
    phi0,
    select_window,
)
from src.observables import CellTable, MarkProfile, OneProfile, ProfileObservable
from src.oracle import ChainDynamics
from src.workers import WorkerPool


@pytest.mark.parametrize("sigma, expected", [
    (np.diag([0.5, 0.5]), 1.0 / math.pi),
    (np.eye(2), 1.0 / (2.0 * math.pi)),
    (np.diag([0.4, 0.4]), 5.0 / (4.0 * math.pi)),
])
def test_phi0_of_known_matrices(sigma, expected):
    est = phi0(sigma)
    assert est.value == pytest.approx(expected)
    assert est.stderr == 0.0


def test_phi0_rejects_singular_matrix():
    with pytest.raises(DegenerateMatrix):
        phi0(np.array([[1.0, 1.0], [1.0, 1.0]]))


def test_window_is_first_quiet_run():
    terms = np.array([1.0, 0.5, 0.2, 0.0, 0.001, -0.002, 0.0, 0.0])
    assert select_window(terms, np.full(8, 0.01)) == 2
    with pytest.raises(WindowTooSmall):
        select_window(np.ones(8), np.full(8, 0.01))


def test_lagged_products_match_direct_sums(rng):
    x = rng.standard_normal((3, 50))
    y = rng.standard_normal((3, 50))
    out = lagged_products(x, y, 4)
    for k in range(5):
        assert np.allclose(out[:, k], (x[:, :50 - k] * y[:, k:]).sum(axis=1))


def test_lazy_walk_diffusion_matrix(lazy_dynamics):
    stats = collect_steps(lazy_dynamics, trajectories=2000, n=200, seed=3, max_lag=10,
                          checkpoints=[200], batches=16)
    sigma = diffusion_matrix(stats, K=0)
    assert np.allclose(sigma.matrix, np.diag([0.4, 0.4]), atol=0.02)
    assert sigma.trajectories == 2000
    assert sigma.reversal["max_z"] >= 0.0
    alt = np.array(sigma.alternative[0]["matrix"])
    assert np.allclose(alt, np.diag([0.4, 0.4]), atol=0.06)
    assert phi0(sigma).value == pytest.approx(5.0 / (4.0 * math.pi), rel=0.06)


def test_chunking_does_not_change_statistics(lazy_dynamics):
    one = collect_steps(lazy_dynamics, 600, 50, seed=9, max_lag=5, batches=8)
    many = collect_steps(lazy_dynamics, 600, 50, seed=9, max_lag=5, batches=8, pool=WorkerPool(3))
    assert np.array_equal(one.sums, many.sums)


def test_iid_excursion_variance(rng):
    values = rng.standard_normal(20000)
    rep = excursion_variance(values, [slice(0, 20000)], M=5, batches=16)
    assert rep.value == pytest.approx(1.0, abs=0.12)
    assert rep.terms[0] == pytest.approx(1.0, abs=0.05)
    assert all(abs(t) < 0.05 for t in rep.terms[1:])
    assert rep.method == "induced"


def test_green_kubo_for_marked_walk(marked):
    dynamics = ChainDynamics(marked)
    f = ProfileObservable(CellTable({(0, 0): 1.0}), MarkProfile(marked.w, marked.pi), name="mark")
    rep = green_kubo_variance(f, dynamics, trajectories=4000, seed=1, K=5, batches=16)
    # IID marks of mean zero: only the lag-0 term survives
    assert rep.terms[0] == pytest.approx(1.0)
    assert rep.value == pytest.approx(1.0, abs=0.15)

    g0 = ProfileObservable(CellTable({(0, 0): 1.0}), OneProfile(), name="g0")
    with pytest.raises(NotCentered):
        green_kubo_variance(g0, dynamics, trajectories=200, seed=1, K=2, batches=4)


def test_local_limit_profile_mass(lazy_dynamics):
    prof = local_limit_profile(lazy_dynamics, [16], [(0, 0), (1, 0)], np.diag([0.4, 0.4]),
                               trajectories=20000, seed=2)
    assert prof.total_mass[16] == pytest.approx(1.0)
    origin = [r for r in prof.rows if (r["a_x"], r["a_y"]) == (0, 0)][0]
    assert origin["predicted"] == pytest.approx(5.0 / (4.0 * math.pi))
    assert abs(origin["empirical"] - origin["predicted"]) < 0.1


def test_induced_variance_of_iid_marks(marked):
    mark = ProfileObservable(CellTable({(0, 0): 1.0}), MarkProfile(marked.w, marked.pi), name="mark")
    g0 = ProfileObservable(CellTable({(0, 0): 1.0}), OneProfile(), name="g0")
    out = induced_variance({"mark": mark, "g0": g0}, ChainDynamics(marked), excursions=4000, seed=2,
                           M=3, walkers=4096, batches=16)
    # one visit per excursion: G = ±1 for the mark, G = 1 for g0
    assert out["mark"].terms[0] == pytest.approx(1.0)
    assert abs(out["mark"].value - 1.0) < 0.35
    assert out["g0"].value == pytest.approx(7.0)
    assert out["mark"].extra["excursions"] >= 4000
    assert out["mark"].extra["heavy_tail_caution"]
