import math

import numpy as np
import pytest

from src.core import ConfigInvalid, InsufficientBins, VarianceDegenerate
from src.limit_law_lab import (
    LAPLACE,
    EnsembleRun,
    ensemble_from_arrays,
    exponential_law,
    exponential_test,
    functional_flatness,
    flow_tests,
    joint_dependence,
    joint_test,
    laplace_law,
    laplace_test,
    run_ensemble,
    trend,
    two_sample_nested_check,
)
from src.moments import mc_limit_sampler
from src.observables import CellTable, OneProfile, ProfileObservable
from src.workers import WorkerPool


def test_exponential_law_accepts_scaled_exponentials(rng):
    n, mean = 1000, 0.35
    values = math.log(n) * rng.exponential(mean, 5000)
    rep = exponential_law(values, n, mean)
    assert not rep.degenerate
    assert rep.p_value > 1e-3
    assert rep.moments["mean"]["value"] == pytest.approx(mean, rel=0.06)
    assert len(rep.qq) == 19


def test_exponential_law_degenerate_cases():
    assert exponential_law(np.zeros(100), 50, 0.3).degenerate
    rep = exponential_law(np.ones(100), 50, 0.0)
    assert rep.degenerate and math.isnan(rep.ks)


def test_laplace_law_separates_laplace_from_gaussian(rng):
    n, phi0, sigma_sq = 500, 5.0 / (4.0 * math.pi), 1.0
    scale = math.sqrt(phi0 * sigma_sq * math.log(n))
    good = laplace_law(scale * LAPLACE.rvs(size=20000, random_state=rng), n, phi0, sigma_sq)
    assert good.p_value > 1e-3
    assert good.moments["variance"]["value"] == pytest.approx(1.0, rel=0.08)
    bad = laplace_law(scale * rng.standard_normal(20000), n, phi0, sigma_sq)
    assert bad.p_value < 1e-6


def test_laplace_law_needs_resolved_variance():
    with pytest.raises(VarianceDegenerate):
        laplace_law(np.ones(10), 100, 0.4, 0.01, sigma_stderr=0.01)
    with pytest.raises(VarianceDegenerate):
        laplace_law(np.ones(10), 100, 0.4, 0.0)


def test_trend_flags_decreasing_ks():
    reps = [exponential_law(np.linspace(0.1, 3.0, 50) * math.log(n), n, 1.0) for n in (10, 100)]
    for rep, ks in zip(reps, (0.3, 0.1)):
        rep.ks = ks
    out = trend(reps)
    assert out["decreasing"] and out["final"] == 0.1
    reps[1].ks = 0.5
    assert not trend(reps)["decreasing"]


def test_joint_dependence_recovers_variance_slope(rng):
    phi0, sigma = 0.4, 1.5
    X, Y = mc_limit_sampler(phi0, sigma, 40000, rng)
    rep = joint_dependence(X, Y, expected_slope=sigma ** 2, bins=10, rng=rng, level=0.999)
    assert rep.contains_expected
    assert rep.slope == pytest.approx(sigma ** 2, rel=0.1)
    assert rep.max_mean_z < 5.0
    # shuffling Y against X flattens the conditional second moment
    assert rep.control is not None
    assert not rep.control.contains_expected
    assert "shuffled_control" in rep.to_dict()


def test_joint_dependence_needs_populated_bins(rng):
    X, Y = mc_limit_sampler(0.4, 1.0, 40, rng)
    with pytest.raises(InsufficientBins):
        joint_dependence(X, Y, bins=10, min_per_bin=30)


def test_flatness_of_constant_paths():
    table = np.ones((200, 2, 3))
    run = EnsembleRun(0, 200, [10, 100], [1.0, 1.5, 2.0], "map", {"f": table})
    out = functional_flatness(run, "f")
    assert [r["mean"] for r in out["rows"]] == [0.0, 0.0]
    assert out["decreasing"]
    log = functional_flatness(run, "f", scaling="log")
    assert log["rows"][0]["bound_shape"] == pytest.approx(math.log(2.0) / math.log(10.0))
    with pytest.raises(ConfigInvalid):
        functional_flatness(run, "f", scaling="cube")


def test_nested_runs_compared_at_shared_time(rng):
    sample = rng.standard_normal(2000)
    short = ensemble_from_arrays({"f": sample[:, None]}, [50])
    longer = ensemble_from_arrays({"f": np.stack([sample, 2.0 * sample], axis=1)}, [50, 100])
    assert two_sample_nested_check(short, longer, "f", 50.0)["passed"]
    shifted = ensemble_from_arrays({"f": (sample + 1.0)[:, None]}, [50])
    assert not two_sample_nested_check(short, shifted, "f", 50.0)["passed"]
    with pytest.raises(ConfigInvalid):
        short.at_time("f", 75.0)


def test_ensemble_is_independent_of_threads(lazy_dynamics):
    g0 = ProfileObservable(CellTable({(0, 0): 1.0}), OneProfile(), name="g0")
    kwargs = dict(n_values=[20, 10], trajectories=300, seed=17, chunk_size=64)
    inline = run_ensemble(lazy_dynamics, {"g0": g0}, **kwargs)
    threaded = run_ensemble(lazy_dynamics, {"g0": g0}, pool=WorkerPool(2), **kwargs)
    assert inline.n_values == [10, 20]
    assert np.array_equal(inline.stats["g0"], threaded.stats["g0"])
    first = inline.at("g0", 10)
    assert first.shape == (300,)
    assert np.all(first >= 1.0) and np.all(first <= 10.0)
    # sums are nondecreasing along the grid for a nonnegative observable
    assert np.all(np.diff(inline.window("g0", 20), axis=1) >= 0.0)

    series = exponential_test(inline, "g0", 1.0, 5.0 / (4.0 * math.pi))
    assert [r.n for r in series.reports] == [10, 20]


def test_ensemble_rejects_bad_arguments(lazy_dynamics):
    g0 = ProfileObservable(CellTable({(0, 0): 1.0}), OneProfile(), name="g0")
    with pytest.raises(ConfigInvalid):
        run_ensemble(lazy_dynamics, {"g0": g0}, [10], 10, 0, clock="wall")
    with pytest.raises(ConfigInvalid):
        run_ensemble(lazy_dynamics, {}, [10], 10, 0)
    with pytest.raises(ConfigInvalid):
        run_ensemble(lazy_dynamics, {"g0": g0}, [10], 10, 0, grid=[0.0, 1.0])


def _limit_ensemble(rng, n_values, phi0, sigma, clock="map", count=20000):
    """S_n g and S_n f drawn from their joint limit at every n, with I(g) = 1."""
    g, f = [], []
    for n in n_values:
        X, Y = mc_limit_sampler(phi0, sigma, count, rng)
        g.append(X * math.log(n))
        f.append(Y * math.sqrt(math.log(n)))
    return ensemble_from_arrays({"g": np.stack(g, axis=1), "f": np.stack(f, axis=1)}, n_values, clock=clock)


def test_law_series_on_limit_samples(rng):
    phi0, sigma = 0.4, 1.5
    run = _limit_ensemble(rng, [100, 10000], phi0, sigma)
    expo = exponential_test(run, "g", 1.0, phi0)
    lap = laplace_test(run, "f", phi0, sigma ** 2)
    for series in (expo, lap):
        assert [r.n for r in series.reports] == [100, 10000]
        assert all(r.p_value > 1e-4 for r in series.reports)
        assert series.trend["n"] == [100, 10000]
    assert lap.reports[0].moments["variance"]["value"] == pytest.approx(1.0, abs=0.07)
    assert lap.reports[0].moments["excess_kurtosis"]["value"] == pytest.approx(3.0, abs=1.5)

    joint = joint_test(run, "g", "f", 10000, 1.0, sigma ** 2, rng=rng)
    assert joint.expected_slope == pytest.approx(sigma ** 2)
    assert joint.slope == pytest.approx(sigma ** 2, rel=0.1)


def test_flow_tests_need_a_flow_clock(rng):
    phi0, sigma = 0.3, 1.0
    flow = _limit_ensemble(rng, [200, 2000], phi0, sigma, clock="flow", count=5000)
    out = flow_tests(flow, "f", "g", 1.0, phi0, sigma_sq=sigma ** 2)
    assert "π" in out["normalization"]
    assert all(r.p_value > 1e-4 for r in out["exponential"].reports)
    assert all(r.p_value > 1e-4 for r in out["laplace"].reports)
    assert "laplace" not in flow_tests(flow, "f", "g", 1.0, phi0)

    with pytest.raises(ConfigInvalid):
        flow_tests(_limit_ensemble(rng, [200], phi0, sigma, count=100), "f", "g", 1.0, phi0)
