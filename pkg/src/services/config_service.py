import os
import math
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Tuple

from ..core import (
    BATCH_COUNT,
    CHUNK_SIZE,
    CONFIG_FILE,
    DEFAULT_FLIGHT_CAP,
    DEFAULT_PROBE_POINTS,
    DEFAULT_PROBE_DIRECTIONS,
    DEFAULT_HORIZON_MARGIN,
    DEFAULT_OUT_DIR,
    GL_ORDER,
    LAG_CAP,
    RETURN_CAP,
    ConfigInvalid,
    calculate_sha256,
    load_config,
)

_REQUIRED = object()

# ==========================================
# Schema
# ==========================================
@dataclass(frozen=True)
class ObstacleSpec:
    center: Tuple[float, float]
    radius: float


@dataclass(frozen=True)
class TableSpec:
    obstacles: Tuple[ObstacleSpec, ...] = (ObstacleSpec((0.0, 0.0), 0.4), ObstacleSpec((0.5, 0.5), 0.2))
    flight_cap: float = DEFAULT_FLIGHT_CAP
    horizon_margin: float = DEFAULT_HORIZON_MARGIN
    probe_points: int = DEFAULT_PROBE_POINTS
    probe_directions: int = DEFAULT_PROBE_DIRECTIONS
    quadrature_order: int = GL_ORDER
    tau_max: Optional[float] = None


@dataclass(frozen=True)
class SamplingSpec:
    law: str = "mu_delta0"
    retry_budget: int = 3
    chunk_size: int = CHUNK_SIZE
    record_steps: int = 1000
    record_stride: int = 1


@dataclass(frozen=True)
class EnsembleSpec:
    trajectories: int = 20000
    n_values: Tuple[int, ...] = (10000, 100000, 1000000)
    grid: Tuple[float, ...] = (1.0, 1.25, 1.5, 1.75, 2.0)
    clock: str = "map"


@dataclass(frozen=True)
class LocalLimitSpec:
    ells: Tuple[int, ...] = (16, 64, 256)
    sites: Tuple[Tuple[int, int], ...] = ((0, 0), (1, 0), (1, 1))
    trajectories: int = 100000


@dataclass(frozen=True)
class EstimatorSpec:
    trajectories: int = 100000
    n: int = 10000
    checkpoints: Tuple[int, ...] = (1000, 10000)
    window: Optional[int] = None
    lag_cap: int = LAG_CAP
    batches: int = BATCH_COUNT
    burn_in: int = 0
    integral_samples: int = 1000000
    invariance_samples: int = 1000000
    green_kubo_trajectories: int = 100000
    green_kubo_window: Optional[int] = None
    variance_observables: Tuple[str, ...] = ("dipole", "sin_phi")
    excursions: int = 1000000
    induced_window: int = 20
    walkers: int = 1024
    return_cap: int = RETURN_CAP
    max_cap_rate: float = 0.5
    local_limit: LocalLimitSpec = field(default_factory=LocalLimitSpec)


@dataclass(frozen=True)
class LimitTestSpec:
    g: str = "g0"
    f: str = "dipole"
    joint_bins: int = 10
    flow_theta: Optional[str] = "theta"
    flow_psi: Optional[str] = "psi"
    nested_time: Optional[float] = None
    constants_from: Optional[str] = None


@dataclass(frozen=True)
class OracleSpec:
    chain: Dict[str, Any] = field(default_factory=lambda: {"builtin": "marked_lazy_walk"})
    spectral_chains: Tuple[str, ...] = ("lazy_walk", "sticky_lazy_walk")
    points: int = 101
    gap_threshold: float = 0.05
    ells: Tuple[int, ...] = (50, 100, 200, 500, 1000, 2000)
    dp_limit: int = 256
    green_n: Tuple[int, ...] = (10000, 100000, 1000000)
    exact_upto: int = 200
    local_n: Tuple[int, ...] = (10000, 100000, 1000000)
    trajectories: int = 100000
    exact_recursion_limit: int = 2000
    law_window: int = 200
    tol: float = 1e-3
    excursions: int = 0
    coboundary: Optional[Tuple[float, ...]] = None


@dataclass(frozen=True)
class MomentSpec:
    max_m: int = 10
    sampler_count: int = 100000
    sampler_phi0: float = 5.0 / (4.0 * math.pi)
    sampler_sigma: float = 1.0
    sampler_alpha: float = 1.0
    sampler_beta: float = 1.0
    lattice_q: int = 2
    lattice_n: Tuple[int, ...] = (1000, 100000)


@dataclass(frozen=True)
class Thresholds:
    invariance_p: float = 0.01
    ks_exponential: float = 0.08
    ks_laplace: float = 0.10
    ks_billiard_laplace: float = 0.12
    kurtosis: Tuple[float, float] = (1.5, 4.5)
    local_slope: float = -1.2
    local_phi0_rel: float = 0.01
    spectral_tol: float = 1e-12
    sigma_tol: float = 1e-10
    decomposition_rate: float = 0.9
    z: float = 3.0


@dataclass(frozen=True)
class RunConfig:
    table: TableSpec = field(default_factory=TableSpec)
    sampling: SamplingSpec = field(default_factory=SamplingSpec)
    observables: Tuple[Dict[str, Any], ...] = (
        {"kind": "g0", "name": "g0"},
        {"kind": "dipole", "name": "dipole"},
        {"kind": "sin_phi", "name": "sin_phi"},
    )
    flow_observables: Tuple[Dict[str, Any], ...] = (
        {"kind": "cell0_indicator", "name": "psi"},
        {"kind": "dipole", "name": "theta"},
    )
    ensemble: EnsembleSpec = field(default_factory=EnsembleSpec)
    estimators: EstimatorSpec = field(default_factory=EstimatorSpec)
    limit_tests: LimitTestSpec = field(default_factory=LimitTestSpec)
    oracle: OracleSpec = field(default_factory=OracleSpec)
    moments: MomentSpec = field(default_factory=MomentSpec)
    thresholds: Thresholds = field(default_factory=Thresholds)
    output: str = DEFAULT_OUT_DIR
    seed: int = 0
    threads: int = 1

    def to_dict(self) -> Dict[str, Any]:
        """Every field with its default materialized, JSON-ready."""
        return _plain(asdict(self))

    def with_overrides(self, **changes) -> "RunConfig":
        data = self.to_dict()
        data.update({k: v for k, v in changes.items() if v is not None})
        return parse_config(data)


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value

# ==========================================
# Parsing
# ==========================================
def _section(data: Dict[str, Any], key: str) -> Dict[str, Any]:
    value = data.get(key, {})
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigInvalid(f"{key}: must be an object")
    return value


def _value(data: Dict[str, Any], path: str, key: str, cast: Callable, default=_REQUIRED,
           check: Optional[Callable[[Any], bool]] = None, rule: str = ""):
    where = f"{path}.{key}" if path else key
    if key not in data or data[key] is None:
        if default is _REQUIRED:
            raise ConfigInvalid(f"{where}: required", field=where)
        return default
    try:
        value = cast(data[key])
    except (TypeError, ValueError) as e:
        raise ConfigInvalid(f"{where}: {e}", field=where) from e
    if check is not None and not check(value):
        raise ConfigInvalid(f"{where}: {rule or 'invalid value'}", field=where)
    return value


def _ints(x) -> Tuple[int, ...]:
    if isinstance(x, (int, float)):
        x = [x]
    return tuple(int(v) for v in x)


def _floats(x) -> Tuple[float, ...]:
    if isinstance(x, (int, float)):
        x = [x]
    return tuple(float(v) for v in x)


def _positive(x) -> bool:
    return x > 0


def _all_positive(xs) -> bool:
    return len(xs) > 0 and all(v > 0 for v in xs)


def _from_defaults(cls, data: Dict[str, Any], path: str, rules: Dict[str, Tuple]) -> Any:
    """Builds a section dataclass: each rule is (cast, check, message); missing keys keep the default."""
    defaults = cls()
    kwargs = {}
    for key, (cast, check, rule) in rules.items():
        kwargs[key] = _value(data, path, key, cast, getattr(defaults, key), check, rule)
    unknown = set(data) - set(rules) - {"local_limit", "obstacles"}
    if unknown:
        logging.warning(f"[ConfigService] {path}: ignoring unknown keys {sorted(unknown)}")
    return cls(**kwargs)


def _obstacles(data: Dict[str, Any]) -> Tuple[ObstacleSpec, ...]:
    raw = data.get("obstacles", None)
    if raw is None:
        return TableSpec().obstacles
    if not isinstance(raw, list) or len(raw) < 2:
        raise ConfigInvalid("table.obstacles: need a list of at least 2 obstacles", field="table.obstacles")
    out = []
    for k, item in enumerate(raw):
        path = f"table.obstacles[{k}]"
        if not isinstance(item, dict):
            raise ConfigInvalid(f"{path}: must be an object", field=path)
        center = _value(item, path, "center", _floats,
                        check=lambda c: len(c) == 2 and all(0.0 <= v < 1.0 for v in c),
                        rule="two coordinates in [0, 1)")
        radius = _value(item, path, "radius", float, check=_positive, rule="must be positive")
        out.append(ObstacleSpec(tuple(center), radius))
    return tuple(out)


def _observable_list(data: Dict[str, Any], key: str, default) -> Tuple[Dict[str, Any], ...]:
    raw = data.get(key, None)
    if raw is None:
        return default
    if not isinstance(raw, list):
        raise ConfigInvalid(f"{key}: must be a list", field=key)
    names = set()
    for k, item in enumerate(raw):
        if not isinstance(item, dict) or "kind" not in item:
            raise ConfigInvalid(f"{key}[{k}].kind: required", field=f"{key}[{k}].kind")
        name = item.setdefault("name", item["kind"])
        if name in names:
            raise ConfigInvalid(f"{key}[{k}].name: duplicate name '{name}'", field=f"{key}[{k}].name")
        names.add(name)
    return tuple(raw)


def parse_config(data: Dict[str, Any]) -> RunConfig:
    table = _section(data, "table")
    table_spec = _from_defaults(TableSpec, table, "table", {
        "flight_cap": (float, _positive, "must be positive"),
        "horizon_margin": (float, lambda x: x >= 0, "must be non-negative"),
        "probe_points": (int, _positive, "must be positive"),
        "probe_directions": (int, _positive, "must be positive"),
        "quadrature_order": (int, lambda x: 1 <= x <= 64, "must lie in [1, 64]"),
        "tau_max": (float, _positive, "must be positive"),
    })
    table_spec = replace(table_spec, obstacles=_obstacles(table))

    sampling = _from_defaults(SamplingSpec, _section(data, "sampling"), "sampling", {
        "law": (str, lambda x: x in ("mu_delta0", "mu_box3"), "must be mu_delta0 or mu_box3"),
        "retry_budget": (int, lambda x: x >= 0, "must be non-negative"),
        "chunk_size": (int, _positive, "must be positive"),
        "record_steps": (int, lambda x: x >= 0, "must be non-negative"),
        "record_stride": (int, _positive, "must be positive"),
    })
    ensemble = _from_defaults(EnsembleSpec, _section(data, "ensemble"), "ensemble", {
        "trajectories": (int, _positive, "must be positive"),
        "n_values": (_ints, lambda xs: len(xs) > 0 and all(v >= 2 for v in xs), "values must be ≥ 2"),
        "grid": (_floats, _all_positive, "values must be positive"),
        "clock": (str, lambda x: x in ("map", "flow", "both"), "must be map, flow or both"),
    })

    est = _section(data, "estimators")
    ll = _section(est, "local_limit")
    local = _from_defaults(LocalLimitSpec, ll, "estimators.local_limit", {
        "ells": (_ints, _all_positive, "values must be positive"),
        "sites": (lambda xs: tuple(tuple(int(v) for v in s) for s in xs),
                  lambda xs: all(len(s) == 2 for s in xs), "each site needs two integers"),
        "trajectories": (int, _positive, "must be positive"),
    })
    estimators = _from_defaults(EstimatorSpec, est, "estimators", {
        "trajectories": (int, _positive, "must be positive"),
        "n": (int, lambda x: x >= 2, "must be ≥ 2"),
        "checkpoints": (_ints, lambda xs: all(v >= 1 for v in xs), "values must be ≥ 1"),
        "window": (int, lambda x: x >= 0, "must be non-negative"),
        "lag_cap": (int, _positive, "must be positive"),
        "batches": (int, lambda x: x >= 2, "must be ≥ 2"),
        "burn_in": (int, lambda x: x >= 0, "must be non-negative"),
        "integral_samples": (int, lambda x: x >= 2, "must be ≥ 2"),
        "invariance_samples": (int, _positive, "must be positive"),
        "green_kubo_trajectories": (int, _positive, "must be positive"),
        "green_kubo_window": (int, lambda x: x >= 0, "must be non-negative"),
        "variance_observables": (lambda xs: tuple(str(x) for x in xs), None, ""),
        "excursions": (int, _positive, "must be positive"),
        "induced_window": (int, lambda x: x >= 0, "must be non-negative"),
        "walkers": (int, _positive, "must be positive"),
        "return_cap": (int, _positive, "must be positive"),
        "max_cap_rate": (float, lambda x: 0 <= x <= 1, "must lie in [0, 1]"),
    })
    estimators = replace(estimators, local_limit=local)
    if any(c > estimators.n for c in estimators.checkpoints):
        raise ConfigInvalid("estimators.checkpoints: must not exceed estimators.n", field="estimators.checkpoints")

    limit_tests = _from_defaults(LimitTestSpec, _section(data, "limit_tests"), "limit_tests", {
        "g": (str, None, ""), "f": (str, None, ""),
        "joint_bins": (int, lambda x: x >= 3, "must be ≥ 3"),
        "flow_theta": (str, None, ""), "flow_psi": (str, None, ""),
        "nested_time": (float, _positive, "must be positive"),
        "constants_from": (str, None, ""),
    })
    oracle = _from_defaults(OracleSpec, _section(data, "oracle"), "oracle", {
        "chain": (dict, lambda d: "builtin" in d or "matrix" in d, "needs 'builtin' or 'matrix'"),
        "spectral_chains": (lambda xs: tuple(str(x) for x in xs), None, ""),
        "points": (int, lambda x: x >= 3, "must be ≥ 3"),
        "gap_threshold": (float, _positive, "must be positive"),
        "ells": (_ints, _all_positive, "values must be positive"),
        "dp_limit": (int, _positive, "must be positive"),
        "green_n": (_ints, lambda xs: all(v >= 2 for v in xs), "values must be ≥ 2"),
        "exact_upto": (int, _positive, "must be positive"),
        "local_n": (_ints, lambda xs: all(v >= 2 for v in xs), "values must be ≥ 2"),
        "trajectories": (int, _positive, "must be positive"),
        "exact_recursion_limit": (int, _positive, "must be positive"),
        "law_window": (int, _positive, "must be positive"),
        "tol": (float, _positive, "must be positive"),
        "excursions": (int, lambda x: x >= 0, "must be non-negative"),
        "coboundary": (_floats, None, ""),
    })
    moments = _from_defaults(MomentSpec, _section(data, "moments"), "moments", {
        "max_m": (int, lambda x: 1 <= x <= 12, "must lie in [1, 12]"),
        "sampler_count": (int, lambda x: x >= 2, "must be ≥ 2"),
        "sampler_phi0": (float, _positive, "must be positive"),
        "sampler_sigma": (float, lambda x: x >= 0, "must be non-negative"),
        "sampler_alpha": (float, None, ""),
        "sampler_beta": (float, None, ""),
        "lattice_q": (int, _positive, "must be positive"),
        "lattice_n": (_ints, lambda xs: all(v >= 2 for v in xs), "values must be ≥ 2"),
    })
    thresholds = _from_defaults(Thresholds, _section(data, "thresholds"), "thresholds", {
        "invariance_p": (float, None, ""), "ks_exponential": (float, None, ""),
        "ks_laplace": (float, None, ""), "ks_billiard_laplace": (float, None, ""),
        "kurtosis": (_floats, lambda xs: len(xs) == 2 and xs[0] <= xs[1], "needs [low, high]"),
        "local_slope": (float, None, ""), "local_phi0_rel": (float, _positive, "must be positive"),
        "spectral_tol": (float, _positive, "must be positive"), "sigma_tol": (float, _positive, "must be positive"),
        "decomposition_rate": (float, lambda x: 0 < x < 1, "must lie in (0, 1)"),
        "z": (float, _positive, "must be positive"),
    })

    return RunConfig(
        table=table_spec,
        sampling=sampling,
        observables=_observable_list(data, "observables", RunConfig().observables),
        flow_observables=_observable_list(data, "flow_observables", RunConfig().flow_observables),
        ensemble=ensemble,
        estimators=estimators,
        limit_tests=limit_tests,
        oracle=oracle,
        moments=moments,
        thresholds=thresholds,
        output=_value(data, "", "output", str, DEFAULT_OUT_DIR),
        seed=_value(data, "", "seed", int, 0, lambda x: 0 <= x < 2 ** 64, "must be an unsigned 64-bit integer"),
        threads=_value(data, "", "threads", int, 1, _positive, "must be positive"),
    )

# ==========================================
# Service
# ==========================================
class ConfigService:
    """Loads, validates and materializes run configurations."""

    @staticmethod
    def load(path: str = CONFIG_FILE) -> Tuple[RunConfig, str]:
        """Returns the validated config and the uppercase SHA-256 of the file bytes."""
        config = parse_config(load_config(path))
        digest = calculate_sha256(path)
        logging.info(f"[ConfigService] loaded {os.path.basename(path)} (sha256 {digest[:12]}…)")
        return config, digest

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> RunConfig:
        return parse_config(dict(data))

    @staticmethod
    def from_manifest(path: str) -> RunConfig:
        """Rebuilds the exact run recorded in a manifest (config with overrides applied)."""
        manifest = load_config(path)
        if "config" not in manifest:
            raise ConfigInvalid("manifest.config: required", field="manifest.config")
        return parse_config(manifest["config"])

    @staticmethod
    def apply_overrides(config: RunConfig, seed: Optional[int] = None, threads: Optional[int] = None,
                        out: Optional[str] = None, clock: Optional[str] = None,
                        max_m: Optional[int] = None) -> RunConfig:
        """Command-line overrides; nested ones are validated like the file itself."""
        data = config.to_dict()
        if clock is not None:
            data["ensemble"]["clock"] = clock
        if max_m is not None:
            data["moments"]["max_m"] = max_m
        return parse_config(data).with_overrides(seed=seed, threads=threads, output=out)
