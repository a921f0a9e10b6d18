import math
from fractions import Fraction

import numpy as np
import pytest

from src.core import CompositionMismatch, ConfigInvalid
from src.moments import (
    AdmissiblePair,
    brute_force_cN,
    combinatorial_moment,
    compositions,
    enumerate_admissible,
    group_count,
    is_admissible,
    lattice_sum_ratio,
    limit_moment_closed,
    multiplicity_cN,
    sampler_moment_check,
    verify_moments,
)
from src.workers import WorkerPool


@pytest.mark.parametrize("m, N", [(3, (2, 1)), (4, (1, 1, 2)), (5, (2, 2, 1)), (6, (3, 3))])
def test_multiplicity_matches_brute_force(m, N):
    assert multiplicity_cN(m, N) == brute_force_cN(m, N)


def test_multiplicity_rejects_non_compositions():
    with pytest.raises(CompositionMismatch):
        multiplicity_cN(4, (2, 1))
    with pytest.raises(CompositionMismatch):
        multiplicity_cN(2, (2, 0))
    with pytest.raises(ConfigInvalid):
        brute_force_cN(9, (9,))


def test_compositions_into_ones_and_twos():
    assert sorted(compositions(4, (1, 2))) == [(1, 1, 1, 1), (1, 1, 2), (1, 2, 1), (2, 1, 1), (2, 2)]
    assert len(list(compositions(5))) == 2 ** 4


def test_admissibility_rules():
    assert is_admissible((1, 1), (0, 1))
    assert not is_admissible((1, 1), (1, 0))
    assert not is_admissible((2, 1), (0, 1))
    assert not is_admissible((1, 1, 1), (0, 1, 1))
    assert not is_admissible((3,), (0,))


def test_admissible_pairs_of_two():
    groups = enumerate_admissible(2)
    assert {k: len(v) for k, v in groups.items()} == {(0, 0): 1, (2, 0): 1, (2, 1): 1}
    pair = groups[(2, 0)][0]
    assert pair == AdmissiblePair((1, 1), (0, 1))
    assert pair.J11 == (1,) and pair.J1 == () and pair.J2 == ()


def test_group_sizes_follow_binomials():
    groups = enumerate_admissible(7, pool=WorkerPool(2))
    for (r, s), pairs in groups.items():
        assert len(pairs) == group_count(7, r, s)
    assert sum(len(p) for p in groups.values()) == sum(
        group_count(7, 2 * h, s) for h in range(4) for s in range(h + 1))
    with pytest.raises(ConfigInvalid):
        enumerate_admissible(13)


def test_closed_form_second_moment():
    a, b, phi0, s2 = Fraction(2), Fraction(3), Fraction(1, 5), Fraction(7, 4)
    assert limit_moment_closed(2, a, b, phi0, sigma_sq=s2) == 2 * a ** 2 * phi0 ** 2 + b ** 2 * phi0 * s2
    assert limit_moment_closed(1, a, b, phi0, sigma_sq=s2) == a * phi0
    assert limit_moment_closed(0, a, b, phi0, sigma_sq=s2) == 1
    with pytest.raises(ConfigInvalid):
        limit_moment_closed(2, a, b, phi0)


@pytest.mark.parametrize("m", range(1, 11))
def test_combinatorial_moment_is_exact(m):
    alpha, beta, phi0, S0, S1 = Fraction(1, 2), Fraction(-1), Fraction(2), Fraction(1, 9), Fraction(4, 3)
    value = combinatorial_moment(m, alpha, beta, phi0, S0, S1)
    assert isinstance(value, Fraction)
    assert value == limit_moment_closed(m, alpha, beta, phi0, sigma_sq=S0 + 2 * S1)


def test_odd_pure_laplace_moments_vanish():
    for m in (1, 3, 5):
        assert limit_moment_closed(m, 0, Fraction(3, 2), Fraction(1, 7), sigma_sq=Fraction(2)) == 0


def test_sampler_agrees_with_closed_form():
    rows = sampler_moment_check(0.4, 1.2, 0.7, 1.0, 200000, np.random.default_rng(7), max_m=4, z=5.0)
    assert [r["m"] for r in rows] == [1, 2, 3, 4]
    assert all(r["passed"] for r in rows)


def test_lattice_sums():
    for row in lattice_sum_ratio(1, [10, 100]):
        n = row["n"]
        assert row["sum"] == pytest.approx(sum(1.0 / k for k in range(1, n + 1)))
    assert lattice_sum_ratio(2, [2])[0]["sum"] == pytest.approx(1.0)
    big = lattice_sum_ratio(2, [100, 10000])
    # Σ_{ℓ1+ℓ2≤n} 1/(ℓ1ℓ2) ~ (ln n)²: the ratio drifts towards 1
    assert abs(big[1]["ratio"] - 1.0) < abs(big[0]["ratio"] - 1.0)


def test_full_verification():
    report = verify_moments(max_m=4)
    assert report.passed
    assert report.max_m == 4
    assert {r["m"] for r in report.moments} == {1, 2, 3, 4}
    assert all(r["passed"] for r in report.odd_moments)
    with pytest.raises(ConfigInvalid):
        verify_moments(max_m=0)


def test_full_verification_reaches_tenth_moment():
    report = verify_moments(max_m=10)
    assert report.passed
    assert report.max_m == 10
    assert {r["m"] for r in report.moments} == set(range(1, 11))
    assert all(r["passed"] for r in report.moments)
    assert {r["m"] for r in report.odd_moments} == {1, 3, 5, 7, 9}
    assert {r["m"] for r in report.group_counts} == set(range(1, 11))
