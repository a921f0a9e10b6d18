"""Exact combinatorics behind the moments of the limit law (αΦ₀E + β√(Φ₀E)σN).

Identity checks run in Fraction arithmetic; only the sampler uses floats.
"""
import math
import logging
import itertools
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import fftconvolve

from .core import CompositionMismatch, ConfigInvalid, MismatchDetected

MAX_ENUMERATION_M = 12
MAX_BRUTE_FORCE_M = 8
DEFAULT_PARAMETER_GRID = (
    (Fraction(1), Fraction(1), Fraction(1, 3), Fraction(1), Fraction(1, 2)),
    (Fraction(0), Fraction(1), Fraction(1, 2), Fraction(2), Fraction(0)),
    (Fraction(1), Fraction(0), Fraction(5, 4), Fraction(1), Fraction(1)),
    (Fraction(-2, 3), Fraction(3, 2), Fraction(1, 7), Fraction(3, 5), Fraction(-1, 4)),
    (Fraction(1, 2), Fraction(-1), Fraction(2), Fraction(1, 9), Fraction(4, 3)),
)

# ==========================================
# Multiplicities
# ==========================================
def multiplicity_cN(m: int, N: Sequence[int]) -> int:
    """Number of maps {1..m} → {1..q} whose fibers have sizes N: the multinomial m!/ΠN_j!."""
    N = [int(k) for k in N]
    if any(k < 1 for k in N) or sum(N) != m:
        raise CompositionMismatch(f"N={tuple(N)} is not a composition of m={m}", m=m, N=list(N))
    out = math.factorial(m)
    for k in N:
        out //= math.factorial(k)
    return out


def brute_force_cN(m: int, N: Sequence[int]) -> int:
    """Counts the maps by walking all q^m of them."""
    N = tuple(int(k) for k in N)
    if sum(N) != m:
        raise CompositionMismatch(f"N={N} is not a composition of m={m}", m=m)
    if m > MAX_BRUTE_FORCE_M:
        raise ConfigInvalid(f"moments.max_m: brute force limited to m ≤ {MAX_BRUTE_FORCE_M}")
    return fiber_census(m, len(N)).get(N, 0)


@lru_cache(maxsize=None)
def fiber_census(m: int, q: int, block: int = 1 << 18) -> Dict[Tuple[int, ...], int]:
    """Fiber-size vector of every map {1..m} → {1..q}, tallied."""
    powers = q ** np.arange(m, dtype=np.int64)
    base = (m + 1) ** np.arange(q, dtype=np.int64)
    total = q ** m
    tally: Dict[int, int] = {}
    for lo in range(0, total, block):
        codes = np.arange(lo, min(lo + block, total), dtype=np.int64)
        digits = (codes[:, None] // powers[None, :]) % q
        fibers = np.stack([(digits == j).sum(axis=1) for j in range(q)], axis=1)
        keys, counts = np.unique(fibers @ base, return_counts=True)
        for key, c in zip(keys.tolist(), counts.tolist()):
            tally[key] = tally.get(key, 0) + c
    out = {}
    for key, c in tally.items():
        out[tuple((key // (m + 1) ** j) % (m + 1) for j in range(q))] = c
    return out


def compositions(m: int, parts: Sequence[int] = None):
    """All compositions of m (into the allowed part sizes, default any positive size)."""
    if m == 0:
        yield ()
        return
    sizes = range(1, m + 1) if parts is None else [p for p in parts if p <= m]
    for first in sizes:
        for rest in compositions(m - first, parts):
            yield (first,) + rest

# ==========================================
# Admissible Pairs
# ==========================================
@dataclass(frozen=True)
class AdmissiblePair:
    N: Tuple[int, ...]
    eps: Tuple[int, ...]

    @property
    def q(self) -> int:
        return len(self.N)

    @property
    def J2(self) -> Tuple[int, ...]:
        return tuple(i + 1 for i, k in enumerate(self.N) if k == 2)

    @property
    def J11(self) -> Tuple[int, ...]:
        """First index of each correlated pair (i−1, i) with ε_i = 1."""
        return tuple(i for i, e in enumerate(self.eps) if e == 1)

    @property
    def J1(self) -> Tuple[int, ...]:
        paired = set(self.J11) | {i + 1 for i in self.J11}
        return tuple(i + 1 for i, k in enumerate(self.N) if k == 1 and (i + 1) not in paired)

    @property
    def m(self) -> int:
        return sum(self.N)

    @property
    def r(self) -> int:
        return 2 * len(self.J11) + 2 * len(self.J2)

    @property
    def s(self) -> int:
        return len(self.J2)

    def to_row(self) -> Dict[str, Any]:
        def fmt(xs):
            return " ".join(str(x) for x in xs)
        return {"m": self.m, "q": self.q, "N": fmt(self.N), "eps": fmt(self.eps), "J2": fmt(self.J2),
                "J1": fmt(self.J1), "J11": fmt(self.J11), "r": self.r, "s": self.s}


CSV_COLUMNS = ["m", "q", "N", "eps", "J2", "J1", "J11", "r", "s"]


def is_admissible(N: Sequence[int], eps: Sequence[int]) -> bool:
    if len(N) != len(eps) or not N:
        return False
    for i, (k, e) in enumerate(zip(N, eps)):
        if k not in (1, 2) or e not in (0, 1):
            return False
        if k == 2 and e != 0:
            return False
        if e == 1 and (i == 0 or k != 1 or N[i - 1] != 1 or eps[i - 1] != 0):
            return False
    return True


def _admissible_for_q(m: int, q: int) -> List[AdmissiblePair]:
    out = []
    for N in compositions(m, (1, 2)):
        if len(N) != q:
            continue
        for eps in itertools.product((0, 1), repeat=q):
            if is_admissible(N, eps):
                out.append(AdmissiblePair(tuple(N), tuple(eps)))
    return out


def enumerate_admissible(m: int, pool=None) -> Dict[Tuple[int, int], List[AdmissiblePair]]:
    """Every admissible (N, ε) of total mass m, grouped by (r, s); groups are checked against the binomial count."""
    if m < 0 or m > MAX_ENUMERATION_M:
        raise ConfigInvalid(f"moments.max_m: enumeration supports 0 ≤ m ≤ {MAX_ENUMERATION_M}")
    qs = list(range(1, m + 1))
    per_q = pool.map(lambda q: _admissible_for_q(m, q), qs) if pool is not None else \
        [_admissible_for_q(m, q) for q in qs]
    groups: Dict[Tuple[int, int], List[AdmissiblePair]] = {}
    for pairs in per_q:
        for p in pairs:
            groups.setdefault((p.r, p.s), []).append(p)
    for (r, s), pairs in groups.items():
        expected = group_count(m, r, s)
        if len(pairs) != expected:
            raise MismatchDetected(f"m={m} (r={r}, s={s}): {len(pairs)} pairs, expected {expected}",
                                   m=m, r=r, s=s)
    return dict(sorted(groups.items()))


def group_count(m: int, r: int, s: int) -> int:
    h = r // 2
    return math.comb(m - h, h) * math.comb(h, s)

# ==========================================
# Moments of the Limit Law
# ==========================================
def _num(x):
    if isinstance(x, (int, Fraction)):
        return Fraction(x)
    return x


def limit_moment_closed(m: int, alpha, beta, phi0, sigma=None, sigma_sq=None):
    """E[(αΦ₀E + β√(Φ₀E)σN)^m]; exact when the inputs are rational (pass sigma_sq to keep σ² rational)."""
    if m < 0:
        raise ConfigInvalid("moments.m: must be non-negative")
    if sigma_sq is None:
        if sigma is None:
            raise ConfigInvalid("moments: sigma or sigma_sq is required")
        sigma_sq = _num(sigma) * _num(sigma)
    alpha, beta, phi0, sigma_sq = _num(alpha), _num(beta), _num(phi0), _num(sigma_sq)
    total = Fraction(0) if all(isinstance(x, Fraction) for x in (alpha, beta, phi0, sigma_sq)) else 0.0
    for r in range(0, m + 1, 2):
        h = r // 2
        gauss = math.factorial(r) // (2 ** h * math.factorial(h))
        total += (math.comb(m, r) * alpha ** (m - r) * math.factorial(m - h) * phi0 ** (m - h)
                  * gauss * beta ** r * sigma_sq ** h)
    return total


def combinatorial_moment(m: int, alpha, beta, phi0, S0, S1,
                         groups: Optional[Dict[Tuple[int, int], List[AdmissiblePair]]] = None):
    """m!·Σ over admissible pairs of 2^{−|J₂|} Φ₀^{(m+|J₁|)/2} β^{m−|J₁|} α^{|J₁|} S₀^{|J₂|} S₁^{|J₁,₁|}.

    Raises MismatchDetected unless it equals the closed form with σ² = S₀ + 2S₁.
    """
    alpha, beta, phi0, S0, S1 = (_num(x) for x in (alpha, beta, phi0, S0, S1))
    groups = groups if groups is not None else (enumerate_admissible(m) if m else {})
    exact = all(isinstance(x, Fraction) for x in (alpha, beta, phi0, S0, S1))
    total = Fraction(0) if exact else 0.0
    if m == 0:
        total += 1
    for pairs in groups.values():
        for p in pairs:
            j1, j2, j11 = len(p.J1), len(p.J2), len(p.J11)
            total += (Fraction(1, 2 ** j2) * phi0 ** ((m + j1) // 2) * beta ** (m - j1)
                      * alpha ** j1 * S0 ** j2 * S1 ** j11)
    total *= math.factorial(m)
    closed = limit_moment_closed(m, alpha, beta, phi0, sigma_sq=S0 + 2 * S1)
    same = total == closed if exact else math.isclose(total, closed, rel_tol=1e-9, abs_tol=1e-12)
    if not same:
        raise MismatchDetected(f"m={m}: assembly {total} differs from closed form {closed}", m=m)
    return total

# ==========================================
# Sampler and Lattice Sums
# ==========================================
def mc_limit_sampler(phi0: float, sigma: float, count: int,
                     rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Samples (Φ₀E, σ√(Φ₀E)N) with E standard exponential and N standard normal, independent."""
    E = rng.standard_exponential(count)
    N = rng.standard_normal(count)
    return phi0 * E, sigma * np.sqrt(phi0 * E) * N


def sampler_moment_check(phi0: float, sigma: float, alpha: float, beta: float, count: int,
                         rng: np.random.Generator, max_m: int = 6, z: float = 4.0) -> List[Dict[str, Any]]:
    """Empirical E[(αA + βB)^m] against the closed form for m = 1..max_m."""
    A, B = mc_limit_sampler(phi0, sigma, count, rng)
    X = alpha * A + beta * B
    rows = []
    for m in range(1, max_m + 1):
        powers = X ** m
        value = float(powers.mean())
        stderr = float(powers.std(ddof=1) / math.sqrt(count))
        expected = float(limit_moment_closed(m, alpha, beta, phi0, sigma=sigma))
        rows.append({"m": m, "empirical": value, "stderr": stderr, "closed": expected,
                     "passed": bool(abs(value - expected) <= z * stderr + 1e-12)})
    return rows


def lattice_sum_ratio(q: int, n_values: Sequence[int]) -> List[Dict[str, float]]:
    """Σ over ℓ ∈ {1..n}^q with Σℓ ≤ n of Π 1/ℓ_i, divided by (ln n)^q."""
    rows = []
    for n in sorted(int(v) for v in n_values):
        h = np.zeros(n + 1)
        h[1:] = 1.0 / np.arange(1, n + 1)
        conv = h.copy()
        for _ in range(q - 1):
            conv = fftconvolve(conv, h)[:n + 1]
        total = float(np.clip(conv, 0.0, None).sum())
        rows.append({"q": q, "n": n, "sum": total, "ratio": total / math.log(n) ** q})
    return rows

# ==========================================
# Full Verification
# ==========================================
@dataclass
class MomentsReport:
    max_m: int
    brute_force: List[Dict[str, Any]]
    group_counts: List[Dict[str, Any]]
    moments: List[Dict[str, Any]]
    odd_moments: List[Dict[str, Any]]
    admissible_rows: List[Dict[str, Any]]

    @property
    def passed(self) -> bool:
        rows = self.brute_force + self.group_counts + self.moments + self.odd_moments
        return all(r["passed"] for r in rows)

    def to_dict(self) -> Dict[str, Any]:
        return {"max_m": self.max_m, "passed": self.passed, "brute_force": self.brute_force,
                "group_counts": self.group_counts, "moments": self.moments, "odd_moments": self.odd_moments}


def verify_moments(max_m: int = 10, grid=DEFAULT_PARAMETER_GRID, pool=None) -> MomentsReport:
    """Runs every identity up to max_m (enumeration capped at 12, brute force at 8)."""
    if max_m < 1:
        raise ConfigInvalid("moments.max_m: must be at least 1")
    brute = []
    for m in range(1, min(max_m, MAX_BRUTE_FORCE_M) + 1):
        for N in compositions(m):
            exact, counted = multiplicity_cN(m, N), brute_force_cN(m, N)
            brute.append({"m": m, "N": " ".join(map(str, N)), "cN": exact, "brute": counted,
                          "passed": exact == counted})

    counts, moments, rows = [], [], []
    for m in range(1, min(max_m, MAX_ENUMERATION_M) + 1):
        try:
            groups = enumerate_admissible(m, pool)
        except MismatchDetected as e:
            logging.error(f"[Moments] {e}")
            counts.append({"m": m, "passed": False, "message": str(e)})
            continue
        for (r, s), pairs in groups.items():
            counts.append({"m": m, "r": r, "s": s, "count": len(pairs), "expected": group_count(m, r, s),
                           "passed": len(pairs) == group_count(m, r, s)})
            for p in pairs:
                if p.J2:
                    ok = multiplicity_cN(m, p.N) * 2 ** len(p.J2) == math.factorial(m)
                    if not ok:
                        counts.append({"m": m, "N": p.to_row()["N"], "passed": False})
            rows.extend(p.to_row() for p in pairs)
        for k, (alpha, beta, phi0, S0, S1) in enumerate(grid):
            entry = {"m": m, "point": k}
            try:
                value = combinatorial_moment(m, alpha, beta, phi0, S0, S1, groups)
                entry.update({"value": str(value), "passed": True})
            except MismatchDetected as e:
                entry.update({"message": str(e), "passed": False})
            moments.append(entry)

    odd = []
    for m in range(1, max_m + 1, 2):
        for k, (_, beta, phi0, S0, S1) in enumerate(grid):
            value = limit_moment_closed(m, 0, beta, phi0, sigma_sq=S0 + 2 * S1)
            odd.append({"m": m, "point": k, "value": str(value), "passed": value == 0})
    report = MomentsReport(max_m, brute, counts, moments, odd, rows)
    logging.info(f"[Moments] m ≤ {max_m}: {'all identities hold' if report.passed else 'FAILED'}")
    return report
