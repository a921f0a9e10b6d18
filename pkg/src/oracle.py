"""Exactly solvable Z² walks driven by a finite Markov chain.

Convention: the step F is attached to the departing state, S_n = Σ_{k<n} F(X_k)
with X_0 ~ π. With Q_u = diag(e^{i<u,F>}) M one has E[e^{i<u,S_n>}] = π Q_u^n 1;
twisted_matrix returns the transfer-operator form P_u, which has the same
spectrum and satisfies ∫ P_u^n(1) dπ = E[e^{i<u,S_n>}].
"""
import math
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy import special
from scipy.signal import fftconvolve

from .core import (
    BATCH_COUNT,
    CHUNK_SIZE,
    POWER_MAX_ITER,
    POWER_TOL,
    RETURN_CAP,
    ChainInvalid,
    ConfigInvalid,
    GapCollapse,
    TailNotCertified,
    TruncationError,
)
from .dynamics import DynamicsStrategy, StepResult, Walk, induced_excursions
from .estimators import excursion_variance
from .observables import ProfileObservable, CellTable, MarkProfile
from .utils.rng import chunk_generator
from .utils.stats import gaussian_density

UNIT_STEPS = np.array([(1, 0), (-1, 0), (0, 1), (0, -1)], dtype=np.int64)
LAZY_STEPS = np.array([(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)], dtype=np.int64)

# ==========================================
# Chains
# ==========================================
@dataclass
class OracleChain:
    name: str
    M: np.ndarray
    F: np.ndarray
    w: np.ndarray
    pi: np.ndarray = field(init=False)

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=float)
        self.F = np.asarray(self.F, dtype=np.int64).reshape(-1, 2)
        self.w = np.asarray(self.w, dtype=float).reshape(-1)
        d = len(self.M)
        if self.M.shape != (d, d) or len(self.F) != d or len(self.w) != d:
            raise ChainInvalid(f"{self.name}: matrix, steps and marks disagree on the state count")
        if np.any(self.M < 0) or np.max(np.abs(self.M.sum(axis=1) - 1.0)) > 1e-14:
            raise ChainInvalid(f"{self.name}: rows must be probability vectors")
        if not self._primitive():
            raise ChainInvalid(f"{self.name}: chain is not irreducible and aperiodic")
        vals, vecs = np.linalg.eig(self.M.T)
        v = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
        self.pi = v / v.sum()
        if np.any(self.pi <= 0):
            raise ChainInvalid(f"{self.name}: stationary vector is not positive")
        drift = self.pi @ self.F
        if np.max(np.abs(drift)) > 1e-12:
            raise ChainInvalid(f"{self.name}: step has nonzero mean {drift.tolist()}")

    def _primitive(self) -> bool:
        d = len(self.M)
        power = (self.M > 0).astype(np.int64)
        pattern = power.copy()
        for _ in range((d - 1) ** 2 + 1):
            if pattern.all():
                return True
            pattern = ((pattern @ power) > 0).astype(np.int64)
        return bool(pattern.all())

    @property
    def size(self) -> int:
        return len(self.M)

    @property
    def row_identical(self) -> bool:
        return bool(np.allclose(self.M, self.M[0][None, :], atol=1e-15, rtol=0.0))

    @property
    def max_step(self) -> int:
        return int(np.abs(self.F).max())

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "matrix": self.M.tolist(), "steps": self.F.tolist(),
                "marks": self.w.tolist()}


def lazy_walk() -> OracleChain:
    return OracleChain("lazy_walk", np.full((5, 5), 0.2), LAZY_STEPS, np.zeros(5))


def simple_walk() -> OracleChain:
    return OracleChain("simple_walk", np.full((4, 4), 0.25), UNIT_STEPS, np.zeros(4))


def sticky_lazy_walk(persistence: float = 0.5) -> OracleChain:
    if not 0.0 <= persistence < 1.0:
        raise ChainInvalid("sticky_lazy_walk: persistence must lie in [0, 1)")
    M = persistence * np.eye(5) + (1.0 - persistence) / 5.0 * np.ones((5, 5))
    return OracleChain("sticky_lazy_walk", M, LAZY_STEPS, np.zeros(5))


def marked_lazy_walk() -> OracleChain:
    steps = np.concatenate([LAZY_STEPS, LAZY_STEPS])
    marks = np.concatenate([np.ones(5), -np.ones(5)])
    return OracleChain("marked_lazy_walk", np.full((10, 10), 0.1), steps, marks)


BUILTIN_CHAINS = {
    "lazy_walk": lambda p: lazy_walk(),
    "simple_walk": lambda p: simple_walk(),
    "sticky_lazy_walk": lambda p: sticky_lazy_walk(float(p.get("persistence", 0.5))),
    "marked_lazy_walk": lambda p: marked_lazy_walk(),
}


def chain_from_config(spec: Dict[str, Any]) -> OracleChain:
    """Built-in by name, or inline {"matrix", "steps", "marks"}."""
    if "builtin" in spec:
        name = spec["builtin"]
        if name not in BUILTIN_CHAINS:
            raise ConfigInvalid(f"oracle.chain.builtin: unknown chain '{name}'")
        chain = BUILTIN_CHAINS[name](spec)
        if "marks" in spec:
            chain = OracleChain(chain.name, chain.M, chain.F, spec["marks"])
        return chain
    for key in ("matrix", "steps"):
        if key not in spec:
            raise ConfigInvalid(f"oracle.chain.{key}: required")
    marks = spec.get("marks", [0.0] * len(spec["matrix"]))
    return OracleChain(spec.get("name", "custom"), spec["matrix"], spec["steps"], marks)

# ==========================================
# Chain as a Dynamics Strategy
# ==========================================
@dataclass
class ChainBatch:
    state: np.ndarray

    def __len__(self):
        return len(self.state)

    def item(self, k: int) -> int:
        return int(self.state[k])

    def take(self, sel) -> "ChainBatch":
        return ChainBatch(self.state[sel])

    def put(self, sel, other: "ChainBatch"):
        self.state[sel] = other.state

    def copy(self) -> "ChainBatch":
        return ChainBatch(self.state.copy())


def _next_states(cdf: np.ndarray, state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(len(state))
    nxt = (cdf[state] < u[:, None]).sum(axis=1)
    return np.minimum(nxt, cdf.shape[1] - 1)


class ChainDynamics(DynamicsStrategy):
    """Markov shift of an oracle chain with its Z² extension; every step takes unit time."""
    name = "oracle"
    uniforms_per_state = 1
    has_flow = False

    def __init__(self, chain: OracleChain):
        self.chain = chain
        self._cdf = np.cumsum(chain.M, axis=1)
        self._pi_cdf = np.cumsum(chain.pi)

    def sample_base(self, uniforms):
        state = np.searchsorted(self._pi_cdf, uniforms[:, 0], side="right")
        return ChainBatch(np.minimum(state, self.chain.size - 1).astype(np.int64))

    def advance(self, batch: ChainBatch, rng: np.random.Generator) -> StepResult:
        F = self.chain.F[batch.state]
        nxt = _next_states(self._cdf, batch.state, rng)
        n = len(batch)
        return StepResult(ChainBatch(nxt), F, np.ones(n), np.zeros(n, dtype=bool))

    def batch_of(self, bases) -> ChainBatch:
        return ChainBatch(np.array(list(bases), dtype=np.int64))

    def item(self, batch: ChainBatch, k: int) -> int:
        return batch.item(k)

# ==========================================
# Twisted Operators
# ==========================================
def twisted_matrix(chain: OracleChain, u) -> np.ndarray:
    """P_u[k, j] = π_j M_jk e^{i<u,F_j>} / π_k."""
    u = np.asarray(u, dtype=float)
    phase = np.exp(1j * (chain.F @ u))
    return (chain.pi[None, :] * chain.M.T * phase[None, :]) / chain.pi[:, None]


def _twisted_stack(chain: OracleChain, us: np.ndarray) -> np.ndarray:
    phase = np.exp(1j * (us @ chain.F.T))
    base = chain.pi[None, :] * chain.M.T / chain.pi[:, None]
    return base[None, :, :] * phase[:, None, :]


def _q_stack(chain: OracleChain, us: np.ndarray) -> np.ndarray:
    phase = np.exp(1j * (us @ chain.F.T))
    return phase[:, :, None] * chain.M[None, :, :]


def characteristic(chain: OracleChain, us: np.ndarray, n: int) -> np.ndarray:
    """E[e^{i<u,S_n>}] for a stack of u, shape (G, 2)."""
    us = np.asarray(us, dtype=float).reshape(-1, 2)
    if chain.row_identical:
        phi = np.exp(1j * (us @ chain.F.T)) @ chain.pi
        return phi ** n
    Q = np.linalg.matrix_power(_q_stack(chain, us), n)
    return np.einsum("j,gjk,k->g", chain.pi, Q, np.ones(chain.size))


def _power_iteration(P: np.ndarray, start: np.ndarray, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER):
    """Dominant eigenpair of every matrix in a stack; λ is the Rayleigh quotient of the unit iterate.

    Returns (λ, vector, converged). A point converges once ‖Px − λx‖ ≤ tol·max(1, |λ|).
    """
    G, d, _ = P.shape
    x = np.broadcast_to(np.asarray(start, dtype=complex), (G, d)).copy()
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    lam = np.zeros(G, dtype=complex)
    active = np.ones(G, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if not len(idx):
            break
        xa = x[idx]
        y = np.einsum("gij,gj->gi", P[idx], xa)
        la = np.einsum("gi,gi->g", xa.conj(), y)
        lam[idx] = la
        resid = np.linalg.norm(y - la[:, None] * xa, axis=1)
        done = resid <= tol * np.maximum(1.0, np.abs(la))
        active[idx[done]] = False
        nrm = np.linalg.norm(y, axis=1)
        move = ~done & (nrm > 0.0)
        x[idx[move]] = y[move] / nrm[move, None]
    return lam, x, ~active


def _leading_dense(P: np.ndarray):
    vals, right = np.linalg.eig(P)
    order = np.argsort(-np.abs(vals), axis=1)
    lead = order[:, 0]
    g = np.arange(len(P))
    lam = vals[g, lead]
    second = np.abs(vals[g, order[:, 1]]) if P.shape[1] > 1 else np.zeros(len(P))
    r = right[g, :, lead]
    lvals, left = np.linalg.eig(np.swapaxes(P, 1, 2))
    pick = np.argmin(np.abs(lvals - lam[:, None]), axis=1)
    l = left[g, :, pick]
    norm = np.einsum("gi,gi->g", l, r)
    proj = r[:, :, None] * l[:, None, :] / norm[:, None, None]
    return lam, second, proj


def _leading(P: np.ndarray):
    """Leading eigenvalue, the second modulus, the spectral projector and the stalled-point count.

    The leading pair comes from power iteration on P and Pᵀ, the second modulus from the
    deflated stack P − λΠ. Points where an iteration stalls have tied moduli (no gap there)
    and are resolved by a dense eigen-decomposition instead.
    """
    G, d, _ = P.shape
    lam, r, ok_r = _power_iteration(P, np.ones(d))
    _, l, ok_l = _power_iteration(np.swapaxes(P, 1, 2), np.ones(d))
    norm = np.einsum("gi,gi->g", l, r)
    # two-sided quotient lᵀPr / lᵀr is second order in the residuals
    sharp = np.abs(norm) > 1e-3
    lam[sharp] = np.einsum("gi,gij,gj->g", l[sharp], P[sharp], r[sharp]) / norm[sharp]
    norm = np.where(np.abs(norm) > 0.0, norm, 1.0)
    proj = r[:, :, None] * l[:, None, :] / norm[:, None, None]
    if d > 1:
        mu, _, ok_d = _power_iteration(P - lam[:, None, None] * proj, 1.0 + 0.1 * np.arange(d))
        second = np.abs(mu)
    else:
        second, ok_d = np.zeros(G), np.ones(G, dtype=bool)
    stalled = np.flatnonzero(~(ok_r & ok_l & ok_d))
    if len(stalled):
        lam[stalled], second[stalled], proj[stalled] = _leading_dense(P[stalled])
        logging.debug(f"[Oracle] power iteration stalled at {len(stalled)}/{G} points, dense fallback used")
    return lam, second, proj, len(stalled)


def sigma_sq_exact(chain: OracleChain) -> np.ndarray:
    """Σ² = C_0 + Σ_{k≥1}(C_k + C_kᵀ) from the fundamental matrix."""
    d = chain.size
    Z = np.linalg.inv(np.eye(d) - chain.M + np.outer(np.ones(d), chain.pi))
    F = chain.F.astype(float)
    C0 = F.T @ (chain.pi[:, None] * F)
    G = F.T @ (chain.pi[:, None] * ((Z - np.eye(d)) @ F))
    return C0 + G + G.T


def phi0_exact(chain: OracleChain) -> float:
    return float(1.0 / (2.0 * math.pi * math.sqrt(np.linalg.det(sigma_sq_exact(chain)))))


@dataclass
class TwistedSpectrum:
    grid: np.ndarray
    lam: np.ndarray
    gap: np.ndarray
    sigma_sq_spec: np.ndarray
    residual_exponent: float
    decomposition_rate: float
    decomposition_constant: float
    projector_error: float
    lambda0_error: float
    pi0_error: float
    continuity_constant: float
    periodic_points: List[List[float]]
    max_modulus: float
    stalled_points: int = 0

    @property
    def periodic(self) -> bool:
        return bool(self.periodic_points)

    def closed_form_error(self, fn) -> float:
        u1, u2 = np.meshgrid(self.grid, self.grid, indexing="ij")
        return float(np.max(np.abs(self.lam - fn(u1, u2))))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "grid_points": int(len(self.grid)),
            "sigma_sq_spec": self.sigma_sq_spec.tolist(),
            "residual_exponent": self.residual_exponent,
            "decomposition_rate": self.decomposition_rate,
            "decomposition_constant": self.decomposition_constant,
            "projector_error": self.projector_error,
            "lambda0_error": self.lambda0_error,
            "pi0_error": self.pi0_error,
            "continuity_constant": self.continuity_constant,
            "max_modulus": self.max_modulus,
            "periodic": self.periodic,
            "periodic_points": self.periodic_points[:16],
            "stalled_points": self.stalled_points,
        }


def _spec_sigma(chain: OracleChain, h: float, levels: int = 3) -> np.ndarray:
    """Richardson extrapolation of −2 log λ_{h e}/h² along e1, e2, e1+e2 over steps h, h/2, …"""
    dirs = np.array([(1.0, 0.0), (0.0, 1.0), (1.0, 1.0)])
    steps = h / 2.0 ** np.arange(levels + 1)
    us = (steps[:, None, None] * dirs[None, :, :]).reshape(-1, 2)
    lam, _, _, _ = _leading(_twisted_stack(chain, us))
    table = (np.real(-2.0 * np.log(lam)).reshape(levels + 1, 3)) / (steps ** 2)[:, None]
    for k in range(1, levels + 1):
        table = (4.0 ** k * table[1:] - table[:-1]) / (4.0 ** k - 1.0)
    q = table[0]
    off = 0.5 * (q[2] - q[0] - q[1])
    return np.array([[q[0], off], [off, q[1]]])


def twisted_spectrum(chain: OracleChain, points: int = 101, gap_threshold: float = 0.05,
                     horizon: int = 40, h: float = 0.1, allow_collapse: bool = False) -> TwistedSpectrum:
    """Leading spectral data of P_u on a grid of [−π, π]².

    Raises GapCollapse when the gap at u = 0 is below gap_threshold or when |λ_u| = 1 away
    from u = 0; with allow_collapse the spectrum is returned with the periodic points flagged.
    """
    grid = np.linspace(-math.pi, math.pi, points)
    u1, u2 = np.meshgrid(grid, grid, indexing="ij")
    us = np.stack([u1.ravel(), u2.ravel()], axis=1)
    P = _twisted_stack(chain, us)
    lam, second, proj, stalled = _leading(P)
    modulus = np.abs(lam)
    gap = modulus - second
    radius = np.hypot(us[:, 0], us[:, 1])
    origin = int(np.argmin(radius))

    periodic = [us[k].tolist() for k in np.flatnonzero((modulus >= 1.0 - 1e-12) & (radius > 1e-12))]
    if gap[origin] < gap_threshold and not allow_collapse:
        raise GapCollapse(f"{chain.name}: spectral gap {gap[origin]:.3g} at u = 0 is below {gap_threshold}")
    if periodic:
        if not allow_collapse:
            raise GapCollapse(f"{chain.name}: |λ_u| = 1 away from u = 0 at {len(periodic)} grid points")
        logging.warning(f"[Oracle] {chain.name}: |λ_u| = 1 away from u = 0 at {len(periodic)} grid points")

    sigma_spec = _spec_sigma(chain, h)
    radii = np.geomspace(0.02, 0.3, 12)
    e = np.array([math.cos(0.3), math.sin(0.3)])
    lam_r, _, _, _ = _leading(_twisted_stack(chain, radii[:, None] * e[None, :]))
    resid = np.abs(np.real(-2.0 * np.log(lam_r)) - radii ** 2 * float(e @ sigma_spec @ e))
    keep = resid > 1e-14
    residual_exponent = (float(np.polyfit(np.log(radii[keep]), np.log(resid[keep]), 1)[0])
                         if keep.sum() >= 3 else math.inf)

    region = (gap >= gap_threshold) & (modulus >= gap_threshold)
    Pg, lg, pg = P[region], lam[region], proj[region]
    projector_error = float(np.max(np.abs(pg @ pg - pg))) if len(pg) else 0.0

    worst = []
    power = np.broadcast_to(np.eye(chain.size), Pg.shape).astype(complex)
    for n in range(1, horizon + 1):
        power = power @ Pg
        R = power - (lg ** n)[:, None, None] * pg
        worst.append(float(np.max(np.linalg.norm(R, ord=2, axis=(1, 2)))) if len(R) else 0.0)
    worst = np.array(worst)
    ns = np.arange(1, horizon + 1)
    live = worst > 1e-13
    if live.sum() >= 3:
        slope, icpt = np.polyfit(ns[live], np.log(worst[live]), 1)
        rate, const = float(math.exp(slope)), float(math.exp(icpt))
    else:
        rate, const = 0.0, float(worst.max()) if len(worst) else 0.0

    pi0 = np.outer(np.ones(chain.size), chain.pi)
    near = region & (radius > 0) & (radius <= 0.5)
    cont = (np.linalg.norm(proj[near] - pi0[None], ord=2, axis=(1, 2)) / radius[near]) if near.any() else np.zeros(1)

    spec = TwistedSpectrum(
        grid=grid, lam=lam.reshape(points, points), gap=gap.reshape(points, points),
        sigma_sq_spec=sigma_spec, residual_exponent=residual_exponent,
        decomposition_rate=rate, decomposition_constant=const,
        projector_error=projector_error,
        lambda0_error=float(abs(lam[origin] - 1.0)),
        pi0_error=float(np.max(np.abs(proj[origin] - pi0))),
        continuity_constant=float(np.max(cont)),
        periodic_points=periodic,
        max_modulus=float(modulus.max()),
        stalled_points=stalled)
    logging.info(f"[Oracle] {chain.name}: Σ²_spec diag {np.diag(sigma_spec).tolist()}, "
                 f"residual rate {rate:.4f}")
    return spec

# ==========================================
# Exact Step Distributions
# ==========================================
@dataclass
class StepDistribution:
    ell: int
    radius: int
    probs: np.ndarray
    method: str

    @property
    def marginal(self) -> np.ndarray:
        return self.probs.sum(axis=0)

    def prob(self, a) -> float:
        x, y = int(a[0]) + self.radius, int(a[1]) + self.radius
        size = 2 * self.radius + 1
        if not (0 <= x < size and 0 <= y < size):
            return 0.0
        return float(self.marginal[x, y])

    def sites(self) -> np.ndarray:
        span = np.arange(-self.radius, self.radius + 1)
        gx, gy = np.meshgrid(span, span, indexing="ij")
        return np.stack([gx, gy], axis=-1)

    def rows(self):
        m = self.marginal
        for i, j in zip(*np.nonzero(m)):
            yield {"ell": self.ell, "a_x": int(i) - self.radius, "a_y": int(j) - self.radius,
                   "probability": float(m[i, j])}


def _shift(A: np.ndarray, fx: int, fy: int) -> np.ndarray:
    out = np.zeros_like(A)
    n = A.shape[0]
    xs = slice(max(fx, 0), n + min(fx, 0))
    xd = slice(max(-fx, 0), n + min(-fx, 0))
    ys = slice(max(fy, 0), n + min(fy, 0))
    yd = slice(max(-fy, 0), n + min(-fy, 0))
    out[xs, ys] = A[xd, yd]
    return out


def _dp(chain: OracleChain, ell: int, radius: int, init: np.ndarray):
    """Yields (k, A_k), A_k[j, a] = E[init(X_0); S_k = a, X_k = j] for k = 0..ell."""
    size = 2 * radius + 1
    A = np.zeros((chain.size, size, size))
    A[:, radius, radius] = init
    yield 0, A
    rows = chain.row_identical
    smax = chain.max_step
    for k in range(1, ell + 1):
        reach = min(radius, k * smax)
        lo, hi = radius - reach, radius + reach + 1
        shifted = np.zeros_like(A)
        for j in range(chain.size):
            fx, fy = int(chain.F[j, 0]), int(chain.F[j, 1])
            shifted[j, lo:hi, lo:hi] = _shift(A[j, lo:hi, lo:hi], fx, fy)
        if rows:
            A = chain.M[0][:, None, None] * shifted.sum(axis=0)[None, :, :]
        else:
            A = np.einsum("jxy,jk->kxy", shifted, chain.M)
        yield k, A


def _fourier(chain: OracleChain, ell: int, radius: int) -> np.ndarray:
    size = 2 * radius + 1
    u = 2.0 * math.pi * np.arange(size) / size
    if chain.row_identical:
        phase1 = np.exp(1j * np.outer(u, chain.F[:, 0]))
        phase2 = np.exp(1j * np.outer(u, chain.F[:, 1]))
        phi = np.einsum("aj,bj,j->ab", phase1, phase2, chain.pi)
        p = np.real(np.fft.fftshift(np.fft.fft2(phi ** ell))) / size ** 2
        return chain.pi[:, None, None] * p[None, :, :]
    chi = np.zeros((chain.size, size, size), dtype=complex)
    for a, u1 in enumerate(u):
        us = np.stack([np.full(size, u1), u], axis=1)
        Q = np.linalg.matrix_power(_q_stack(chain, us), ell)
        chi[:, a, :] = np.einsum("j,gjk->kg", chain.pi, Q)
    return np.real(np.fft.fftshift(np.fft.fft2(chi, axes=(1, 2)), axes=(1, 2))) / size ** 2


def exact_step_distribution(chain: OracleChain, ell: int, radius: Optional[int] = None,
                            method: str = "auto", dp_limit: int = 256,
                            alias_tol: float = 1e-13) -> StepDistribution:
    """P(S_ℓ = a, X_ℓ = j) on the box |a|∞ ≤ radius."""
    if ell < 0:
        raise ConfigInvalid("ell: must be non-negative")
    support = ell * chain.max_step
    if method == "auto":
        method = "dp" if ell <= dp_limit else "fourier"
    if method == "dp":
        box = support if radius is None else radius
        if box < support:
            raise TruncationError(f"box radius {box} < support radius {support}", ell=ell)
        for _, A in _dp(chain, ell, box, chain.pi):
            pass
        return StepDistribution(ell, box, A, "dp")
    if method != "fourier":
        raise ConfigInvalid(f"oracle.method: unknown '{method}'")
    if radius is None:
        spread = float(np.max(np.diag(sigma_sq_exact(chain))))
        radius = min(support, int(math.ceil(8.0 * math.sqrt(max(ell, 1) * spread))) + chain.max_step)
    probs = _fourier(chain, ell, radius)
    if radius < support:
        band = max(1, chain.max_step)
        m = probs.sum(axis=0)
        edge = m.copy()
        edge[band:-band, band:-band] = 0.0
        if np.abs(edge).sum() > alias_tol:
            raise TruncationError(f"mass {np.abs(edge).sum():.3e} near the box edge at ℓ={ell}",
                                  ell=ell, radius=radius)
    return StepDistribution(ell, radius, probs, "fourier")


@dataclass
class LocalLimitRate:
    ells: List[int]
    errors: List[float]
    slope: float
    phi0: float
    scaled_origin: List[float]
    periodic_flag: bool

    def to_dict(self) -> Dict[str, Any]:
        return {"ells": self.ells, "errors": self.errors, "slope": self.slope, "phi0": self.phi0,
                "scaled_origin": self.scaled_origin, "periodic_flag": self.periodic_flag}


def local_limit_rate(chain: OracleChain, ells: Sequence[int], margin: float = 0.05,
                     dp_limit: int = 256) -> LocalLimitRate:
    """sup_a |P(S_ℓ = a) − Φ(a/√ℓ)/ℓ| over ℓ, with its log-log slope."""
    sigma_sq = sigma_sq_exact(chain)
    phi0 = float(gaussian_density(sigma_sq, np.zeros(2)))
    errors, scaled = [], []
    for ell in ells:
        dist = exact_step_distribution(chain, int(ell), dp_limit=dp_limit)
        pred = gaussian_density(sigma_sq, dist.sites() / math.sqrt(ell)) / ell
        errors.append(float(np.max(np.abs(dist.marginal - pred))))
        scaled.append(float(ell * dist.prob((0, 0))))
    slope = float(np.polyfit(np.log(np.asarray(ells, dtype=float)), np.log(errors), 1)[0])
    flag = slope > -1.0 - margin
    if flag:
        logging.warning(f"[Oracle] {chain.name}: local limit error does not beat 1/ℓ (slope {slope:.3f})")
    return LocalLimitRate([int(e) for e in ells], errors, slope, phi0, scaled, flag)

# ==========================================
# Green Function and Local Times
# ==========================================
def origin_probabilities(chain: OracleChain, kmax: int) -> np.ndarray:
    """P(S_k = 0) for k = 0..kmax−1 by dynamic programming."""
    out = np.zeros(kmax)
    if kmax <= 0:
        return out
    radius = (kmax - 1) * chain.max_step
    for k, A in _dp(chain, kmax - 1, radius, chain.pi):
        out[k] = A[:, radius, radius].sum()
    return out


def _walk_periodic(chain: OracleChain) -> bool:
    corners = np.array([(math.pi, math.pi), (math.pi, 0.0), (0.0, math.pi)])
    lam, _, _, _ = _leading(_twisted_stack(chain, corners))
    return bool(np.any(np.abs(lam) >= 1.0 - 1e-12))


def origin_probability_quadrature(chain: OracleChain, ks: Sequence[int], nodes: int = 96) -> np.ndarray:
    """P(S_k = 0) = (4π²k)⁻¹ ∫ E[e^{i<v,S_k>/√k}] dv, Gauss–Legendre in the scaled variable."""
    if _walk_periodic(chain):
        raise GapCollapse(f"{chain.name}: |λ_u| = 1 away from u = 0; the walk is periodic")
    sigma_sq = sigma_sq_exact(chain)
    smin = float(np.linalg.eigvalsh(sigma_sq).min())
    cutoff = 14.0 / math.sqrt(smin)
    x, wts = np.polynomial.legendre.leggauss(nodes)
    out = []
    for k in ks:
        half = min(math.pi * math.sqrt(k), cutoff)
        v = half * x
        v1, v2 = np.meshgrid(v, v, indexing="ij")
        us = np.stack([v1.ravel(), v2.ravel()], axis=1) / math.sqrt(k)
        vals = characteristic(chain, us, int(k)).reshape(nodes, nodes)
        total = half ** 2 * float(np.real(wts @ vals @ wts))
        out.append(total / (4.0 * math.pi ** 2 * k))
    return np.array(out)


@dataclass
class GreenFunction:
    n_values: List[int]
    expected_visits: List[float]
    exact_upto: int
    fit: List[float]
    phi0: float
    slope: Optional[float]

    def to_dict(self) -> Dict[str, Any]:
        return {"n_values": self.n_values, "expected_visits": self.expected_visits,
                "exact_upto": self.exact_upto, "fit_k_p_k": self.fit, "phi0": self.phi0,
                "slope_vs_log_n": self.slope}


def green_function(chain: OracleChain, n_values: Sequence[int], exact_upto: int = 200,
                   nodes: int = 96) -> GreenFunction:
    """E[N₀(n)] = Σ_{k<n} P(S_k = 0): exact terms below exact_upto, fitted Gaussian-scaled tail beyond."""
    if _walk_periodic(chain):
        raise GapCollapse(f"{chain.name}: periodic walk, no uniform local limit")
    n_values = sorted(int(n) for n in n_values)
    exact = origin_probabilities(chain, exact_upto)
    head = np.cumsum(exact)
    fit = [0.0, 0.0, 0.0]
    top = max(n_values)
    if top > exact_upto:
        ks = np.unique(np.geomspace(exact_upto, max(top, exact_upto * 4), 24).astype(np.int64))
        kp = ks * origin_probability_quadrature(chain, ks, nodes)
        fit = np.polyfit(1.0 / ks, kp, 2)[::-1].tolist()
    a0, a1, a2 = fit
    expected = []
    for n in n_values:
        if n <= exact_upto:
            expected.append(float(head[n - 1]) if n > 0 else 0.0)
            continue
        k0 = exact_upto
        tail = (a0 * (special.digamma(n) - special.digamma(k0))
                + a1 * (special.polygamma(1, k0) - special.polygamma(1, n))
                + a2 * 0.5 * (special.polygamma(2, n) - special.polygamma(2, k0)))
        expected.append(float(head[-1] + tail))
    slope = None
    if len(n_values) >= 2:
        slope = float((expected[-1] - expected[-2]) / (math.log(n_values[-1]) - math.log(n_values[-2])))
    return GreenFunction(n_values, expected, exact_upto, [float(c) for c in fit], phi0_exact(chain), slope)


@dataclass
class LocalTimeLaw:
    n: int
    pmf: np.ndarray
    phi0: float
    ks_exponential: float

    @property
    def mean(self) -> float:
        return float(np.arange(len(self.pmf)) @ self.pmf)

    def to_dict(self) -> Dict[str, Any]:
        return {"n": self.n, "mean": self.mean, "phi0": self.phi0,
                "ks_exponential": self.ks_exponential, "support_max": int(len(self.pmf) - 1)}


def origin_probabilities_fourier(chain: OracleChain, kmax: int) -> np.ndarray:
    """P(S_k = 0), k < kmax, from the trapezoid rule on a periodic grid (IID steps)."""
    spread = float(np.max(np.diag(sigma_sq_exact(chain))))
    # no aliasing while the grid covers |S_k| ≤ (kmax−1)·max_step, or the Gaussian bulk
    size = min(2 * (kmax - 1) * chain.max_step + 1, 2 * int(math.ceil(12.0 * math.sqrt(kmax * spread))) + 1)
    size = max(size, 3)
    u = 2.0 * math.pi * np.arange(size) / size
    phase1 = np.exp(1j * np.outer(u, chain.F[:, 0]))
    phase2 = np.exp(1j * np.outer(u, chain.F[:, 1]))
    phi = np.einsum("aj,bj,j->ab", phase1, phase2, chain.pi).ravel()
    if np.max(np.abs(phi.imag)) < 1e-15:
        phi = phi.real
    out = np.zeros(kmax)
    power = np.ones_like(phi)
    for k in range(kmax):
        out[k] = float(np.real(power.sum())) / size ** 2
        power = power * phi
    return out


def exact_local_time_law(chain: OracleChain, n: int, limit: int = 2000) -> LocalTimeLaw:
    """Law of N₀(n) = #{0 ≤ k < n : S_k = 0} by renewal over first-return times."""
    if not chain.row_identical:
        raise ChainInvalid(f"{chain.name}: renewal recursion needs IID steps")
    if n > limit:
        raise TruncationError(f"exact recursion limited to n ≤ {limit}", n=n)
    if n < 1:
        raise ConfigInvalid("n: must be at least 1")
    u = origin_probabilities_fourier(chain, n)
    f = np.zeros(n)
    for k in range(1, n):
        f[k] = u[k] - float(f[1:k] @ u[k - 1:0:-1])
    f = np.clip(f, 0.0, None)

    at_least = [1.0]  # P(N₀ ≥ 1)
    conv = np.zeros(n)
    conv[0] = 1.0
    for m in range(1, n):
        conv = np.clip(fftconvolve(conv, f)[:n], 0.0, None)
        mass = float(conv.sum())
        at_least.append(mass)
        if mass < 1e-15:
            break
    at_least = np.array(at_least + [0.0])
    pmf = np.concatenate([[0.0], at_least[:-1] - at_least[1:]])
    pmf = np.clip(pmf, 0.0, None)

    phi0 = phi0_exact(chain)
    scale = phi0 * math.log(n) if n > 1 else 1.0
    cdf = np.cumsum(pmf)
    atoms = np.arange(len(pmf)) / scale
    model = 1.0 - np.exp(-atoms)
    below = np.concatenate([[0.0], cdf[:-1]])
    ks = float(max(np.max(np.abs(cdf - model)), np.max(np.abs(below - model))))
    return LocalTimeLaw(n, pmf, phi0, ks)

# ==========================================
# Simulation
# ==========================================
def _simulate_chunk(chain: OracleChain, n_values: np.ndarray, lanes: int, rng: np.random.Generator,
                    marks: np.ndarray, block: int = 256):
    pi_cdf = np.cumsum(chain.pi)
    cdf = np.cumsum(chain.M, axis=1)
    state = np.minimum(np.searchsorted(pi_cdf, rng.random(lanes), side="right"), chain.size - 1)
    pos = np.zeros((lanes, 2), dtype=np.int64)
    visits = np.zeros(lanes, dtype=np.int64)
    msum = np.zeros(lanes)
    local = np.zeros((lanes, len(n_values)), dtype=np.int64)
    mark_out = np.zeros((lanes, len(n_values)))
    k = 0
    for j, n in enumerate(n_values):
        while k < n:
            b = int(min(block, n - k))
            states = np.empty((lanes, b + 1), dtype=np.int64)
            states[:, 0] = state
            if chain.row_identical:
                draw = np.searchsorted(pi_cdf, rng.random((lanes, b)), side="right")
                states[:, 1:] = np.minimum(draw, chain.size - 1)
            else:
                for t in range(b):
                    states[:, t + 1] = _next_states(cdf, states[:, t], rng)
            steps = chain.F[states[:, :b]]
            path = pos[:, None, :] + np.cumsum(steps, axis=1) - steps
            zero = ~path.any(axis=2)
            visits += zero.sum(axis=1)
            msum += (zero * marks[states[:, :b]]).sum(axis=1)
            pos = pos + steps.sum(axis=1)
            state = states[:, b]
            k += b
        local[:, j] = visits
        mark_out[:, j] = msum
    return local, mark_out


def simulate_birkhoff(chain: OracleChain, n_values: Sequence[int], trajectories: int, seed: int,
                      chunk_size: int = CHUNK_SIZE, pool=None,
                      marks: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    """N₀(n) and Σ_{k<n} w(X_k)·1{S_k = 0} per trajectory; chunk c draws from stream (seed, c)."""
    n_values = np.array(sorted(int(n) for n in n_values), dtype=np.int64)
    marks = chain.w if marks is None else np.asarray(marks, dtype=float)
    starts = list(range(0, trajectories, chunk_size))

    def work(c):
        lo = starts[c]
        lanes = min(chunk_size, trajectories - lo)
        return _simulate_chunk(chain, n_values, lanes, chunk_generator(seed, c), marks)

    parts = pool.map(work, range(len(starts))) if pool is not None else [work(c) for c in range(len(starts))]
    local = np.concatenate([p[0] for p in parts]) if parts else np.zeros((0, len(n_values)))
    mark = np.concatenate([p[1] for p in parts]) if parts else np.zeros((0, len(n_values)))
    return {"n_values": n_values, "local_time": local, "mark_sum": mark}


def simulate_local_times(chain: OracleChain, n_values, trajectories: int, seed: int,
                         chunk_size: int = CHUNK_SIZE, pool=None) -> Dict[str, np.ndarray]:
    out = simulate_birkhoff(chain, n_values, trajectories, seed, chunk_size, pool, np.zeros(chain.size))
    return {"n_values": out["n_values"], "local_time": out["local_time"]}

# ==========================================
# Observable Laws
# ==========================================
@dataclass
class ObservableLaws:
    sigma_tilde_sq: float
    terms: List[float]
    tail: float
    tail_exponent: Optional[float]
    sigma_hat_sq: Optional[float]
    sigma_hat_stderr: Optional[float]
    sigma_hat_method: str

    def to_dict(self) -> Dict[str, Any]:
        return {"sigma_tilde_sq": self.sigma_tilde_sq, "terms": self.terms[:64], "window": len(self.terms) - 1,
                "tail": self.tail, "tail_exponent": self.tail_exponent,
                "sigma_hat_sq": self.sigma_hat_sq, "sigma_hat_stderr": self.sigma_hat_stderr,
                "sigma_hat_method": self.sigma_hat_method}


def correlation_terms(chain: OracleChain, left: np.ndarray, right: np.ndarray, window: int) -> np.ndarray:
    """c_k = E_π[left(X_0)·right(X_k)·1{S_k = 0}] for k = 0..window."""
    radius = window * chain.max_step
    out = np.zeros(window + 1)
    for k, A in _dp(chain, window, radius, chain.pi * left):
        out[k] = float(right @ A[:, radius, radius])
    return out


def _fitted_tail(terms: np.ndarray, margin: float = 0.05):
    ks = np.arange(len(terms))
    keep = (ks >= max(2, len(terms) // 2)) & (np.abs(terms) > 0)
    if keep.sum() < 3:
        return 0.0, None
    slope, icpt = np.polyfit(np.log(ks[keep]), np.log(np.abs(terms[keep])), 1)
    if slope >= -1.0 - margin:
        return math.inf, float(slope)
    K = len(terms) - 1
    return float(2.0 * math.exp(icpt) * K ** (slope + 1.0) / (-slope - 1.0)), float(slope)


def oracle_observable_laws(chain: OracleChain, w: Optional[np.ndarray] = None, window: int = 200,
                           tol: float = 1e-3, excursions: int = 0, seed: int = 0,
                           lag_window: int = 20, batches: int = BATCH_COUNT) -> ObservableLaws:
    """σ̃² and σ̂² of f(x, a) = w(x)·1₀(a) on the chain."""
    w = chain.w if w is None else np.asarray(w, dtype=float)
    if abs(float(chain.pi @ w)) > 1e-12:
        raise ConfigInvalid("oracle.marks: must have zero mean under π")
    c = correlation_terms(chain, w, w, window)
    sigma_t = float(c[0] + 2.0 * c[1:].sum())
    if chain.row_identical:
        tail, expo = 0.0, None
    else:
        tail, expo = _fitted_tail(c)
        if tail > tol:
            raise TailNotCertified(f"tail estimate {tail} above tolerance {tol}", exponent=expo)

    if not w.any():
        return ObservableLaws(sigma_t, c.tolist(), tail, expo, 0.0, 0.0, "exact")
    if chain.row_identical:
        return ObservableLaws(sigma_t, c.tolist(), tail, expo, float(chain.pi @ w ** 2), 0.0, "exact")
    if excursions <= 0:
        return ObservableLaws(sigma_t, c.tolist(), tail, expo, None, None, "skipped")
    sample = _chain_excursions(chain, {"f": _mark_observable(chain, w)}, excursions, seed)
    rep = excursion_variance(sample.sums["f"], sample.segments(), lag_window, batches)
    return ObservableLaws(sigma_t, c.tolist(), tail, expo, rep.value, rep.stderr, "simulated")


def _mark_observable(chain: OracleChain, w: np.ndarray):
    return ProfileObservable(CellTable({(0, 0): 1.0}), MarkProfile(w, chain.pi), name="mark")


def _chain_excursions(chain: OracleChain, observables, excursions: int, seed: int, walkers: int = 1024):
    walk = Walk(ChainDynamics(chain), np.arange(walkers), seed)
    return induced_excursions(walk, observables, excursions, cap=RETURN_CAP)


@dataclass
class CoboundaryLaws:
    windows: List[int]
    sigma_tilde_sq: List[float]
    sigma_hat_sq: Optional[float]
    sigma_hat_stderr: Optional[float]
    excursions: int

    def to_dict(self) -> Dict[str, Any]:
        return {"windows": self.windows, "sigma_tilde_sq": self.sigma_tilde_sq,
                "sigma_hat_sq": self.sigma_hat_sq, "sigma_hat_stderr": self.sigma_hat_stderr,
                "excursions": self.excursions}


def coboundary_laws(chain: OracleChain, v: np.ndarray, windows: Sequence[int] = (10, 50, 200),
                    excursions: int = 0, seed: int = 0, lag_window: int = 20,
                    batches: int = BATCH_COUNT) -> CoboundaryLaws:
    """f = h − h∘T̃ with h = v·1₀. The windowed Green–Kubo sum telescopes to 2(c_K − c_{K+1})."""
    v = np.asarray(v, dtype=float)
    top = max(windows) + 1
    c = correlation_terms(chain, v, v, top)
    sigma_t = [float(2.0 * (c[K] - c[K + 1])) for K in windows]
    hat = err = None
    count = 0
    if excursions > 0:
        sample = _chain_excursions(chain, {"h": _mark_observable(chain, v)}, excursions, seed)
        values, segments = [], []
        start = 0
        for seg in sample.segments():
            h = sample.sums["h"][seg]
            g = h[:-1] - h[1:]
            if len(g):
                values.append(g)
                segments.append(slice(start, start + len(g)))
                start += len(g)
        flat = np.concatenate(values) if values else np.zeros(0)
        rep = excursion_variance(flat, segments, lag_window, batches)
        hat, err, count = rep.value, rep.stderr, len(flat)
    return CoboundaryLaws(list(windows), sigma_t, hat, err, count)
