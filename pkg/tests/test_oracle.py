import math

import numpy as np
import pytest

from src.core import ChainInvalid, ConfigInvalid, GapCollapse, TruncationError
from src.oracle import (
    OracleChain,
    chain_from_config,
    coboundary_laws,
    exact_local_time_law,
    exact_step_distribution,
    green_function,
    local_limit_rate,
    oracle_observable_laws,
    origin_probabilities,
    origin_probabilities_fourier,
    phi0_exact,
    sigma_sq_exact,
    simple_walk,
    simulate_birkhoff,
    simulate_local_times,
    sticky_lazy_walk,
    twisted_matrix,
    twisted_spectrum,
)
from src.workers import WorkerPool


@pytest.mark.parametrize("M, F", [
    ([[0.5, 0.4], [0.5, 0.5]], [(1, 0), (-1, 0)]),
    ([[0.0, 1.0], [1.0, 0.0]], [(1, 0), (-1, 0)]),
    ([[0.5, 0.5], [0.5, 0.5]], [(1, 0), (0, 0)]),
])
def test_bad_chains_rejected(M, F):
    with pytest.raises(ChainInvalid):
        OracleChain("bad", M, F, [0.0, 0.0])


def test_chain_from_config():
    assert chain_from_config({"builtin": "sticky_lazy_walk", "persistence": 0.3}).name == "sticky_lazy_walk"
    inline = chain_from_config({"matrix": [[0.5, 0.5], [0.5, 0.5]], "steps": [[1, 0], [-1, 0]]})
    assert inline.row_identical and inline.max_step == 1
    with pytest.raises(ConfigInvalid):
        chain_from_config({"builtin": "levy_flight"})
    with pytest.raises(ConfigInvalid):
        chain_from_config({"matrix": [[1.0]]})


def test_diffusion_matrices(lazy, sticky):
    assert np.allclose(sigma_sq_exact(lazy), np.diag([0.4, 0.4]))
    assert phi0_exact(lazy) == pytest.approx(5.0 / (4.0 * math.pi))
    # C_k = p^k C_0 for the sticky chain, so Σ² = C_0 (1 + p) / (1 − p)
    assert np.allclose(sigma_sq_exact(sticky), np.diag([1.2, 1.2]))


def test_lazy_twisted_spectrum(lazy):
    spec = twisted_spectrum(lazy, points=41)
    assert spec.closed_form_error(lambda u1, u2: (1.0 + 2.0 * np.cos(u1) + 2.0 * np.cos(u2)) / 5.0) < 1e-10
    assert np.allclose(spec.sigma_sq_spec, np.diag([0.4, 0.4]), atol=1e-6)
    assert spec.lambda0_error < 1e-12
    assert not spec.periodic
    assert spec.to_dict()["grid_points"] == 41


def test_simple_walk_is_periodic():
    with pytest.raises(GapCollapse):
        twisted_spectrum(simple_walk(), points=41)
    assert twisted_spectrum(simple_walk(), points=41, allow_collapse=True).periodic
    with pytest.raises(GapCollapse):
        green_function(simple_walk(), [10])


def test_small_gap_at_origin_raises():
    # P_0 of the sticky chain has eigenvalues 1 and the persistence
    with pytest.raises(GapCollapse):
        twisted_spectrum(sticky_lazy_walk(0.98), points=11)
    spec = twisted_spectrum(sticky_lazy_walk(0.98), points=11, allow_collapse=True)
    assert spec.gap[5, 5] == pytest.approx(0.02, abs=1e-10)


def test_sticky_spectrum_matches_dense_eigenvalues(sticky):
    spec = twisted_spectrum(sticky, points=21)
    assert spec.lambda0_error < 1e-12
    assert spec.gap[10, 10] == pytest.approx(0.5, abs=1e-10)
    assert np.allclose(spec.sigma_sq_spec, sigma_sq_exact(sticky), atol=1e-6)
    for i, j in [(10, 10), (11, 10), (12, 9)]:
        vals = np.linalg.eigvals(twisted_matrix(sticky, (spec.grid[i], spec.grid[j])))
        assert spec.lam[i, j] == pytest.approx(vals[np.argmax(np.abs(vals))], abs=1e-12)
    assert spec.projector_error < 1e-10


def test_step_distribution_methods_agree(lazy):
    dp = exact_step_distribution(lazy, 6, method="dp")
    ft = exact_step_distribution(lazy, 6, radius=6, method="fourier")
    assert dp.marginal.sum() == pytest.approx(1.0)
    assert np.allclose(dp.marginal, ft.marginal, atol=1e-14)
    assert exact_step_distribution(lazy, 1).prob((0, 0)) == pytest.approx(0.2)
    assert dp.prob((50, 0)) == 0.0
    with pytest.raises(TruncationError):
        exact_step_distribution(lazy, 6, radius=3, method="dp")
    with pytest.raises(ConfigInvalid):
        exact_step_distribution(lazy, 2, method="monte_carlo")


def test_origin_probabilities(lazy):
    # S_2 = 0 when both steps stay or one undoes the other: 0.04 + 4·0.04
    p = origin_probabilities(lazy, 3)
    assert np.allclose(p, [1.0, 0.2, 0.2])
    assert np.allclose(origin_probabilities_fourier(lazy, 40), origin_probabilities(lazy, 40), atol=1e-12)


def test_local_limit_rate_beats_one_over_ell(lazy):
    rate = local_limit_rate(lazy, [8, 16, 32])
    assert rate.errors[0] > rate.errors[1] > rate.errors[2]
    assert rate.slope < -1.0
    assert not rate.periodic_flag
    assert rate.scaled_origin[-1] == pytest.approx(5.0 / (4.0 * math.pi), rel=0.03)


def test_green_function_head(lazy):
    green = green_function(lazy, [3, 1, 2], exact_upto=50)
    assert green.n_values == [1, 2, 3]
    assert np.allclose(green.expected_visits, [1.0, 1.2, 1.4])


def test_green_function_tail_grows_like_log(lazy):
    green = green_function(lazy, [1000, 2000], exact_upto=100)
    assert green.expected_visits[1] > green.expected_visits[0]
    assert green.slope == pytest.approx(5.0 / (4.0 * math.pi), rel=0.05)


def test_exact_local_time_law(lazy, sticky):
    law = exact_local_time_law(lazy, 30)
    assert law.pmf.sum() == pytest.approx(1.0, abs=1e-10)
    assert law.pmf[0] == 0.0
    assert law.mean == pytest.approx(float(origin_probabilities(lazy, 30).sum()), rel=1e-8)
    with pytest.raises(ChainInvalid):
        exact_local_time_law(sticky, 10)
    with pytest.raises(TruncationError):
        exact_local_time_law(lazy, 50, limit=40)


def test_simulated_local_times(lazy):
    kwargs = dict(n_values=[10, 5], trajectories=3000, seed=3, chunk_size=512)
    out = simulate_birkhoff(lazy, **kwargs)
    again = simulate_birkhoff(lazy, pool=WorkerPool(2), **kwargs)
    assert list(out["n_values"]) == [5, 10]
    assert np.array_equal(out["local_time"], again["local_time"])
    local = out["local_time"]
    assert local.shape == (3000, 2)
    assert np.all(local[:, 0] >= 1) and np.all(local[:, 1] >= local[:, 0])
    expected = float(origin_probabilities(lazy, 10).sum())
    se = local[:, 1].std(ddof=1) / math.sqrt(len(local))
    assert abs(local[:, 1].mean() - expected) < 5.0 * se
    assert np.all(out["mark_sum"] == 0.0)

    visits = simulate_local_times(lazy, **kwargs)
    assert set(visits) == {"n_values", "local_time"}
    assert np.array_equal(visits["local_time"], local)


def test_marked_walk_variances(marked, lazy):
    laws = oracle_observable_laws(marked, window=30)
    assert laws.sigma_tilde_sq == pytest.approx(1.0, abs=1e-12)
    assert laws.sigma_hat_sq == pytest.approx(1.0)
    assert laws.sigma_hat_method == "exact"
    with pytest.raises(ConfigInvalid):
        oracle_observable_laws(lazy, w=np.array([1.0, 0.0, 0.0, 0.0, 0.0]), window=5)


def test_coboundary_sum_telescopes(lazy):
    laws = coboundary_laws(lazy, np.ones(5), windows=(10, 20))
    p = origin_probabilities(lazy, 22)
    assert laws.sigma_tilde_sq == pytest.approx([2.0 * (p[10] - p[11]), 2.0 * (p[20] - p[21])])
    assert 0.0 < laws.sigma_tilde_sq[1] < laws.sigma_tilde_sq[0] < 0.05
    assert laws.sigma_hat_sq is None


def test_twisted_matrix_eigenvalues(lazy, sticky):
    P0 = twisted_matrix(sticky, [0.0, 0.0])
    assert np.allclose(P0.sum(axis=1), 1.0, atol=1e-14)
    assert np.max(np.abs(np.linalg.eigvals(P0))) == pytest.approx(1.0, abs=1e-12)
    u = np.array([0.7, -1.3])
    lam = np.linalg.eigvals(twisted_matrix(lazy, u))
    top = lam[np.argmax(np.abs(lam))]
    assert top.real == pytest.approx((1.0 + 2.0 * math.cos(0.7) + 2.0 * math.cos(1.3)) / 5.0, abs=1e-12)
    assert abs(top.imag) < 1e-12
