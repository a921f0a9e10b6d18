import math
import time
import logging
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..core import EXIT_OK, AcceptanceFailure, ConfigInvalid, LabError, load_config
from ..geometry import TableConfig, validate_table
from ..dynamics import BilliardDynamics, TRAJECTORY_COLUMNS
from ..observables import (
    ObservableContext,
    FlightIntegratedObservable,
    build_observable,
    build_flow_observable,
    center,
    decay_check,
    integral,
)
from ..estimators import (
    collect_steps,
    diffusion_matrix,
    phi0,
    green_kubo_variance,
    induced_variance,
    local_limit_profile,
)
from ..limit_law_lab import (
    LawSeries,
    run_ensemble,
    exponential_test,
    laplace_test,
    joint_test,
    functional_flatness,
    flow_tests,
    two_sample_nested_check,
    ensemble_from_arrays,
    trend,
)
from ..oracle import (
    BUILTIN_CHAINS,
    chain_from_config,
    twisted_spectrum,
    sigma_sq_exact,
    phi0_exact,
    local_limit_rate,
    green_function,
    exact_local_time_law,
    simulate_birkhoff,
    oracle_observable_laws,
    coboundary_laws,
)
from ..moments import CSV_COLUMNS, verify_moments, sampler_moment_check, lattice_sum_ratio
from ..services.config_service import RunConfig
from ..services.report_service import ReportService, emit_report
from ..utils.rng import STREAM_CONTROL, STREAM_INTEGRAL, stream
from ..workers import WorkerPool

SUBCOMMANDS = ("validate", "estimate", "limit-test", "oracle", "moments")

LAW_COLUMNS = ["n", "target", "ks", "p_value", "mean", "mean_stderr", "variance", "variance_stderr",
               "excess_kurtosis", "excess_kurtosis_stderr", "degenerate"]
QQ_COLUMNS = ["n", "quantile", "empirical", "theoretical"]
CDF_COLUMNS = ["n", "x", "empirical", "theoretical"]
LAG_COLUMNS = ["k", "C_xx", "C_xy", "C_yx", "C_yy", "se_xx", "se_xy", "se_yx", "se_yy"]


class SectionSkipped(Exception):
    """Raised by a section whose prerequisite section did not produce a result."""


def lazy_walk_eigenvalue(u1, u2):
    return (1.0 + 2.0 * np.cos(u1) + 2.0 * np.cos(u2)) / 5.0


def law_rows(series: LawSeries) -> Tuple[List[Dict], List[Dict], List[Dict]]:
    rows, qq, cdf = [], [], []
    for r in series.reports:
        m = r.moments
        rows.append({"n": r.n, "target": r.target, "ks": r.ks, "p_value": r.p_value,
                     "mean": m["mean"]["value"], "mean_stderr": m["mean"]["stderr"],
                     "variance": m["variance"]["value"], "variance_stderr": m["variance"]["stderr"],
                     "excess_kurtosis": m["excess_kurtosis"]["value"],
                     "excess_kurtosis_stderr": m["excess_kurtosis"]["stderr"],
                     "degenerate": r.degenerate})
        qq.extend({"n": r.n, **q} for q in r.qq)
        cdf.extend({"n": r.n, **c} for c in r.cdf)
    return rows, qq, cdf


def reflection_symmetric(table: TableConfig, tol: float = 1e-12) -> bool:
    """True when the obstacle set is invariant under x -> -x (mod 1)."""
    triples = [(float(c[0]), float(c[1]), float(r)) for c, r in zip(table.centers, table.radii)]
    for cx, cy, r in triples:
        mirror = (-cx) % 1.0
        if not any(min(abs(mirror - x), 1.0 - abs(mirror - x)) < tol and abs(cy - y) < tol and abs(r - s) < tol
                   for x, y, s in triples):
            return False
    return True


class ExperimentController:
    """Runs one subcommand as a queue of independent report sections.

    A section that raises a LabError is recorded as failed and the report is
    marked partial; sections depending on it are skipped. Acceptance checks
    are collected on the way and decide the exit status after all artifacts
    are written.
    """

    def __init__(self, config: RunConfig, config_hash: str = "", config_path: Optional[str] = None,
                 overrides: Optional[Dict[str, Any]] = None):
        self.config = config
        self.config_hash = config_hash
        self.config_path = config_path
        self.overrides = overrides or {}
        self.pool = WorkerPool(config.threads)
        self.queue: List[Tuple[str, Callable[[], Optional[Dict[str, Any]]]]] = []
        self.sections: Dict[str, Dict[str, Any]] = {}
        self.results: Dict[str, Any] = {}
        self.tables: Dict[str, Dict[str, Any]] = {}
        self.checks: List[Dict[str, Any]] = []
        self.written: List[str] = []
        self._failure_codes: List[int] = []

    # ==========================================
    # Queue
    # ==========================================
    def run(self, subcommand: str) -> int:
        if subcommand not in SUBCOMMANDS:
            raise ConfigInvalid(f"subcommand: unknown '{subcommand}'")
        started = time.time()
        getattr(self, "_plan_" + subcommand.replace("-", "_"))()
        logging.info(f"[Controller] {subcommand}: {len(self.queue)} sections queued "
                     f"(seed {self.config.seed}, threads {self.config.threads})")
        while self.queue:
            self._process_next_in_queue()

        status = self.status
        report = {
            "subcommand": subcommand,
            "status": status,
            "seed": self.config.seed,
            "config_hash": self.config_hash,
            "sections": self.sections,
            "checks": self.checks,
            "acceptance": self._acceptance(),
        }
        service = ReportService(self.config.output, subcommand)
        self.written = emit_report(service, report, self.tables,
                                   config=self.config.to_dict(), config_hash=self.config_hash,
                                   seed=self.config.seed, started=started, finished=time.time(),
                                   status=status, overrides=self.overrides, config_path=self.config_path)
        logging.info(f"[Controller] {subcommand} finished: {status}, "
                     f"{sum(c['passed'] for c in self.checks)}/{len(self.checks)} checks passed")
        return self.exit_code

    def _enqueue(self, name: str, fn: Callable[[], Optional[Dict[str, Any]]]):
        self.queue.append((name, fn))

    def _process_next_in_queue(self):
        name, fn = self.queue.pop(0)
        logging.info(f"[Controller] section '{name}' started ({len(self.queue)} remaining)")
        t0 = time.time()
        try:
            body = fn() or {}
        except SectionSkipped as e:
            logging.warning(f"[Controller] section '{name}' skipped: {e}")
            self.sections[name] = {"status": "skipped", "reason": str(e)}
            return
        except LabError as e:
            logging.error(f"[Controller] section '{name}' failed [{e.code}]: {e}")
            self.sections[name] = {"status": "failed", **e.to_dict()}
            self._failure_codes.append(e.exit_code)
            return
        self.sections[name] = {"status": "ok", **body}
        logging.info(f"[Controller] section '{name}' done in {time.time() - t0:.1f}s")

    @property
    def status(self) -> str:
        return "ok" if all(s["status"] == "ok" for s in self.sections.values()) else "partial"

    @property
    def accepted(self) -> bool:
        return all(c["passed"] for c in self.checks)

    @property
    def exit_code(self) -> int:
        if self._failure_codes:
            return self._failure_codes[0]
        return EXIT_OK if self.accepted else AcceptanceFailure.exit_code

    def _acceptance(self) -> Dict[str, Any]:
        failed = [c["check"] for c in self.checks if not c["passed"]]
        body: Dict[str, Any] = {"passed": not failed, "failed": failed}
        if failed:
            body.update(AcceptanceFailure(f"{len(failed)} of {len(self.checks)} checks failed").to_dict())
        return body

    # ==========================================
    # Shared State
    # ==========================================
    def _need(self, *keys: str):
        missing = [k for k in keys if k not in self.results]
        if missing:
            raise SectionSkipped(f"prerequisite missing: {', '.join(missing)}")
        values = [self.results[k] for k in keys]
        return values if len(values) > 1 else values[0]

    def _check(self, name: str, passed: bool, value: Any = None, threshold: Any = None, **extra):
        passed = bool(passed)
        self.checks.append({"check": name, "passed": passed, "value": value, "threshold": threshold, **extra})
        if not passed:
            logging.warning(f"[Controller] check '{name}' failed: value={value}, threshold={threshold}")

    def _table(self, name: str, columns: Sequence[str], rows: List[Dict[str, Any]]):
        self.tables[name] = {"columns": list(columns), "rows": rows}

    def _build_table(self) -> TableConfig:
        spec = self.config.table
        triples = [(o.center[0], o.center[1], o.radius) for o in spec.obstacles]
        return TableConfig.from_triples(triples, horizon_bound=spec.tau_max, flight_cap=spec.flight_cap)

    def _certify(self, always_probe: bool = False) -> Dict[str, Any]:
        spec = self.config.table
        table = self._build_table()
        cert = validate_table(table, spec.probe_points, spec.probe_directions, spec.flight_cap,
                              spec.horizon_margin, run_probe=always_probe or spec.tau_max is None,
                              pool=self.pool)
        certified = table.with_horizon(cert.tau_max if spec.tau_max is None else spec.tau_max)
        dynamics = BilliardDynamics(certified, spec.quadrature_order)
        self.results["table"] = certified
        self.results["dynamics"] = dynamics
        self.results["context"] = ObservableContext(table=certified, quadrature_order=spec.quadrature_order)
        body = {"certificate": cert.to_dict(),
                "obstacles": [{"center": list(o.center), "radius": o.radius} for o in spec.obstacles],
                "free_area": certified.free_area, "boundary_total": certified.boundary_total,
                "mean_free_path": certified.mean_free_path,
                "tau_max_used": certified.horizon_bound}
        if spec.tau_max is not None and cert.tau_probe_max is not None:
            covers = spec.tau_max >= cert.tau_probe_max
            body["declared_covers_probe"] = covers
            self._check("table.declared_tau_max", covers, spec.tau_max, cert.tau_probe_max)
        return body

    def _map_observables(self) -> Dict[str, Any]:
        if "observables" not in self.results:
            ctx = self._need("context")
            self.results["observables"] = {spec["name"]: build_observable(dict(spec), ctx)
                                           for spec in self.config.observables}
        return self.results["observables"]

    def _flow_observables(self) -> Dict[str, Any]:
        if "flow_observables" not in self.results:
            ctx = self._need("context")
            self.results["flow_observables"] = {spec["name"]: build_flow_observable(dict(spec), ctx)
                                                for spec in self.config.flow_observables}
        return self.results["flow_observables"]

    def _observable(self, name: str):
        obs = self._map_observables()
        if name not in obs:
            raise ConfigInvalid(f"observables: '{name}' is not registered", field="observables")
        return obs[name]

    def _centered(self, name: str):
        """The observable minus I(f)/I(g)·g, unless its integral is declared zero."""
        f = self._observable(name)
        if f.exact_integral == 0.0:
            return f
        estimate = self.results.get("integrals", {}).get(name)
        if f.exact_integral is None and estimate is None:
            return f
        return center(f, self._observable(self.config.limit_tests.g), estimate)

    # ==========================================
    # validate
    # ==========================================
    def _plan_validate(self):
        self._enqueue("certificate", lambda: self._certify(always_probe=True))
        self._enqueue("invariance", self._section_invariance)
        self._enqueue("trajectory", self._section_trajectory)

    def _section_invariance(self) -> Dict[str, Any]:
        dynamics = self._need("dynamics")
        out = dynamics.invariance_check(self.config.estimators.invariance_samples, self.config.seed)
        level = self.config.thresholds.invariance_p
        for key in ("p_obstacle", "p_r", "p_phi", "p_joint"):
            self._check(f"invariance.{key}", out[key] > level, out[key], level)
        return out

    def _section_trajectory(self) -> Dict[str, Any]:
        dynamics = self._need("dynamics")
        sampling = self.config.sampling
        s0 = dynamics.sample_cell0(stream(self.config.seed, STREAM_CONTROL))
        record = dynamics.record_trajectory(s0, sampling.record_steps, sampling.record_stride,
                                            {"seed": self.config.seed, "stream": STREAM_CONTROL})
        self._table("trajectory", TRAJECTORY_COLUMNS, list(record.rows()))
        cells = record.cell + record.F
        consistent = None
        if sampling.record_stride == 1:
            drift = np.abs(np.cumsum(record.F, axis=0) + np.asarray(s0.cell) - cells).max() if len(cells) else 0
            consistent = int(drift) == 0
        return {"steps": sampling.record_steps, "stride": sampling.record_stride,
                "total_time": record.total_time, "final_cell": cells[-1].tolist() if len(cells) else [0, 0],
                "cell_consistency": consistent}

    # ==========================================
    # estimate
    # ==========================================
    def _plan_estimate(self):
        self._enqueue("certificate", self._certify)
        self._enqueue("integral", self._section_integral)
        self._enqueue("diffusion", self._section_diffusion)
        for name in self.config.estimators.variance_observables:
            self._enqueue(f"green_kubo:{name}", lambda name=name: self._section_green_kubo(name))
        self._enqueue("induced", self._section_induced)
        self._enqueue("local_limit", self._section_local_limit)
        self._enqueue("decay", self._section_decay)

    def _section_integral(self) -> Dict[str, Any]:
        dynamics = self._need("dynamics")
        rng = stream(self.config.seed, STREAM_INTEGRAL)
        out, estimates = {}, {}
        for name, f in self._map_observables().items():
            if f.support() is None:
                continue
            est = integral(f, dynamics, self.config.estimators.integral_samples, rng)
            estimates[name] = est
            out[name] = est.to_dict()
            if est.exact is not None:
                z = abs(est.value - est.exact) / est.stderr if est.stderr > 0 else 0.0
                self._check(f"integral.{name}", z <= self.config.thresholds.z, z, self.config.thresholds.z)
        self.results["integrals"] = estimates
        return {"integrals": out}

    def _section_diffusion(self) -> Dict[str, Any]:
        dynamics = self._need("dynamics")
        est, sampling = self.config.estimators, self.config.sampling
        stats = collect_steps(dynamics, est.trajectories, est.n, self.config.seed, est.lag_cap,
                              est.checkpoints, est.batches, self.pool, sampling.law,
                              sampling.retry_budget, est.burn_in)
        D = diffusion_matrix(stats, est.window, est.lag_cap)
        P = phi0(D)
        self.results["sigma"] = D
        self.results["phi0"] = P
        z = self.config.thresholds.z
        se = np.nan_to_num(D.stderr, nan=0.0)

        self._table("lags", LAG_COLUMNS, [
            {"k": k, "C_xx": C[0, 0], "C_xy": C[0, 1], "C_yx": C[1, 0], "C_yy": C[1, 1],
             "se_xx": s[0, 0], "se_xy": s[0, 1], "se_yx": s[1, 0], "se_yy": s[1, 1]}
            for k, (C, s) in enumerate(zip(D.lags, D.lag_stderr))])

        if D.alternative:
            alt = D.alternative[-1]
            diff = np.abs(np.asarray(alt["matrix"]) - D.matrix)
            combined = np.hypot(np.asarray(alt["stderr"]), se)
            worst = float(np.max(diff / np.maximum(combined, 1e-300)))
            self._check("diffusion.cross_check", worst <= z, worst, z, n=alt["n"])
        if reflection_symmetric(self.results["table"]):
            off = abs(float(D.matrix[0, 1])) / max(float(se[0, 1]), 1e-300)
            self._check("diffusion.symmetric_offdiagonal", off <= z, off, z)
        self._check("diffusion.positive_definite", D.min_eigenvalue > 0.0, D.min_eigenvalue, 0.0)
        self._check("diffusion.reversal", D.reversal["max_z"] <= z + 1.0, D.reversal["max_z"], z + 1.0)
        return {"sigma_sq": D.to_dict(), "phi0": P.to_dict()}

    def _green_kubo(self, f, trajectories: int, window: Optional[int]):
        est, sampling = self.config.estimators, self.config.sampling
        return green_kubo_variance(f, self._need("dynamics"), trajectories, self.config.seed,
                                   window, est.lag_cap, est.batches, pool=self.pool,
                                   retry_budget=sampling.retry_budget)

    def _section_green_kubo(self, name: str) -> Dict[str, Any]:
        est = self.config.estimators
        rep = self._green_kubo(self._centered(name), est.green_kubo_trajectories, est.green_kubo_window)
        self.results.setdefault("sigma_tilde", {})[name] = rep
        self._table(f"green_kubo_{name}", ["k", "value", "stderr"],
                    [{"k": k, "value": v, "stderr": s} for k, (v, s) in enumerate(zip(rep.terms, rep.term_stderr))])
        return rep.to_dict()

    def _section_induced(self) -> Dict[str, Any]:
        dynamics = self._need("dynamics")
        est = self.config.estimators
        observables = {name: self._centered(name) for name in est.variance_observables}
        reports = induced_variance(observables, dynamics, est.excursions, self.config.seed,
                                   est.induced_window, est.walkers, est.return_cap,
                                   max_cap_rate=est.max_cap_rate, batches=est.batches)
        z = self.config.thresholds.z
        tilde = self.results.get("sigma_tilde", {})
        for name, rep in reports.items():
            if name in tilde:
                gap = abs(rep.value - tilde[name].value)
                combined = math.hypot(rep.stderr, tilde[name].stderr)
                score = gap / combined if combined > 0 else (0.0 if gap == 0 else math.inf)
                rep.extra["green_kubo_z"] = score
                self._check(f"variance_equivalence.{name}", score <= z, score, z)
        self.results["sigma_hat"] = reports
        return {name: rep.to_dict() for name, rep in reports.items()}

    def _section_local_limit(self) -> Dict[str, Any]:
        dynamics, D = self._need("dynamics", "sigma")
        ll = self.config.estimators.local_limit
        profile = local_limit_profile(dynamics, ll.ells, ll.sites, D, ll.trajectories, self.config.seed,
                                      self.pool, self.config.sampling.retry_budget)
        self._table("local_limit", ["ell", "a_x", "a_y", "empirical", "predicted", "stderr"], profile.rows)
        return profile.to_dict()

    def _section_decay(self) -> Dict[str, Any]:
        return {name: decay_check(f).to_dict() for name, f in self._map_observables().items()}

    # ==========================================
    # limit-test
    # ==========================================
    def _plan_limit_test(self):
        clock = self.config.ensemble.clock
        lt = self.config.limit_tests
        self._enqueue("certificate", self._certify)
        self._enqueue("constants", self._section_constants)
        if clock in ("map", "both"):
            self._enqueue("ensemble:map", lambda: self._section_ensemble("map"))
            self._enqueue("exponential:map", self._section_exponential_map)
            self._enqueue("laplace:map", self._section_laplace_map)
            self._enqueue("joint:map", self._section_joint)
            self._enqueue("flatness:map", lambda: self._section_flatness("map", [(lt.f, "sqrt"), (lt.g, "log")]))
            if lt.nested_time is not None:
                self._enqueue("nested:map", self._section_nested)
        if clock in ("flow", "both"):
            self._enqueue("ensemble:flow", lambda: self._section_ensemble("flow"))
            self._enqueue("constants:flow", self._section_flow_constants)
            self._enqueue("flow_tests", self._section_flow_tests)
            if lt.flow_theta is not None:
                self._enqueue("flatness:flow", lambda: self._section_flatness("flow", [(lt.flow_theta, "sqrt")]))

    def _section_constants(self) -> Dict[str, Any]:
        lt = self.config.limit_tests
        if lt.constants_from:
            return self._constants_from_report(lt.constants_from)
        self._section_integral()
        body = self._section_diffusion()
        est = self.config.estimators
        rep = self._green_kubo(self._centered(lt.f), est.green_kubo_trajectories, est.green_kubo_window)
        self.results["sigma_f"] = (rep.value, rep.stderr)
        g_int = self.results["integrals"].get(lt.g)
        if g_int is None:
            raise ConfigInvalid(f"limit_tests.g: '{lt.g}' needs finite support", field="limit_tests.g")
        self.results["integral_g"] = g_int.exact if g_int.exact is not None else g_int.value
        return {"phi0": body["phi0"], "sigma_tilde_sq": {"observable": lt.f, **rep.to_dict()},
                "integral_g": {"observable": lt.g, **g_int.to_dict()}, "source": "computed"}

    def _constants_from_report(self, path: str) -> Dict[str, Any]:
        """Φ(0), σ̃²(f) and I(g) read back from an earlier estimate report."""
        lt = self.config.limit_tests
        sections = load_config(path).get("sections", {})
        try:
            phi = sections["diffusion"]["phi0"]
            sigma = sections[f"green_kubo:{lt.f}"]
            g_int = sections["integral"]["integrals"][lt.g]
        except (KeyError, TypeError) as e:
            raise ConfigInvalid(f"limit_tests.constants_from: report lacks {e}",
                                field="limit_tests.constants_from") from e
        self.results["phi0_value"] = float(phi["value"])
        self.results["sigma_f"] = (float(sigma["value"]), float(sigma["stderr"]))
        exact = g_int.get("exact")
        self.results["integral_g"] = float(exact if exact is not None else g_int["value"])
        return {"phi0": phi, "sigma_tilde_sq": {"observable": lt.f, "value": sigma["value"],
                                                "stderr": sigma["stderr"]},
                "integral_g": {"observable": lt.g, **g_int}, "source": path}

    def _phi0_value(self) -> float:
        if "phi0_value" in self.results:
            return self.results["phi0_value"]
        return self._need("phi0").value

    def _section_ensemble(self, clock: str) -> Dict[str, Any]:
        dynamics = self._need("dynamics")
        ens, sampling, lt = self.config.ensemble, self.config.sampling, self.config.limit_tests
        if clock == "map":
            names = list(dict.fromkeys([lt.g, lt.f]))
            observables = {lt.g: self._observable(lt.g), lt.f: self._centered(lt.f)}
        else:
            flows = self._flow_observables()
            names = [n for n in (lt.flow_theta, lt.flow_psi) if n is not None]
            observables = {}
            for n in names:
                if n not in flows:
                    raise ConfigInvalid(f"flow_observables: '{n}' is not registered", field="flow_observables")
                observables[n] = flows[n]
        run = run_ensemble(dynamics, {n: observables[n] for n in names}, ens.n_values, ens.trajectories,
                           self.config.seed, ens.grid, clock, sampling.law, self.pool,
                           sampling.retry_budget, self.config.table.quadrature_order, sampling.chunk_size)
        self.results[f"run:{clock}"] = run
        return run.summary()

    def _law_section(self, label: str, series: LawSeries, ks_max: Optional[float] = None,
                     kurtosis: Optional[Tuple[float, float]] = None, from_index: int = 0) -> Dict[str, Any]:
        rows, qq, cdf = law_rows(series)
        self._table(label, LAW_COLUMNS, rows)
        self._table(f"{label}_qq", QQ_COLUMNS, qq)
        self._table(f"{label}_cdf", CDF_COLUMNS, cdf)
        judged = trend(series.reports[from_index:])
        self._check(f"{label}.trend", judged["decreasing"], judged["ks"])
        final = series.reports[-1]
        if ks_max is not None:
            self._check(f"{label}.ks", final.ks <= ks_max, final.ks, ks_max, n=final.n)
        if kurtosis is not None:
            k = final.moments["excess_kurtosis"]["value"]
            self._check(f"{label}.kurtosis", kurtosis[0] <= k <= kurtosis[1], k, list(kurtosis), n=final.n)
        return series.to_dict()

    def _section_exponential_map(self) -> Dict[str, Any]:
        run, I = self._need("run:map", "integral_g")
        series = exponential_test(run, self.config.limit_tests.g, I, self._phi0_value(),
                                  self.config.estimators.batches)
        return self._law_section("exponential_map", series)

    def _section_laplace_map(self) -> Dict[str, Any]:
        run, (sigma_sq, sigma_se) = self._need("run:map", "sigma_f")
        series = laplace_test(run, self.config.limit_tests.f, self._phi0_value(), sigma_sq, sigma_se,
                              self.config.estimators.batches)
        start = max(0, len(series.reports) - 2)
        return self._law_section("laplace_map", series, self.config.thresholds.ks_billiard_laplace,
                                 from_index=start)

    def _section_joint(self) -> Dict[str, Any]:
        run, I, (sigma_sq, _) = self._need("run:map", "integral_g", "sigma_f")
        lt = self.config.limit_tests
        n = max(run.n_values)
        report = joint_test(run, lt.g, lt.f, n, I, sigma_sq, lt.joint_bins,
                            rng=stream(self.config.seed, STREAM_CONTROL))
        self._table("joint_bins", ["x", "count", "m2", "m2_stderr", "m1", "m1_stderr"], report.bins)
        self._check("joint.slope_ci", bool(report.contains_expected), report.slope,
                    report.expected_slope, ci=report.slope_ci)
        return {"n": n, **report.to_dict()}

    def _section_flatness(self, clock: str, targets) -> Dict[str, Any]:
        run = self._need(f"run:{clock}")
        out = {}
        rows = []
        for name, scaling in targets:
            res = functional_flatness(run, name, scaling, self.config.estimators.batches)
            out[f"{name}:{scaling}"] = res
            rows.extend({"observable": name, "scaling": scaling, **r} for r in res["rows"])
            self._check(f"flatness_{clock}.{name}", res["decreasing"], [r["mean"] for r in res["rows"]])
        self._table(f"flatness_{clock}", ["observable", "scaling", "n", "mean", "stderr", "bound_shape"], rows)
        return out

    def _section_nested(self) -> Dict[str, Any]:
        run_a = self._need("run:map")
        ens, sampling, lt = self.config.ensemble, self.config.sampling, self.config.limit_tests
        t = float(lt.nested_time)
        observables = {lt.f: self._centered(lt.f)}
        run_b = run_ensemble(self._need("dynamics"), observables, [int(round(t))], ens.trajectories,
                             (self.config.seed + 1) % 2 ** 64, [1.0], "map", sampling.law, self.pool,
                             sampling.retry_budget, self.config.table.quadrature_order, sampling.chunk_size)
        out = two_sample_nested_check(run_a, run_b, lt.f, t)
        self._check("nested.two_sample", out["passed"], out["p_value"], 0.01)
        return out

    def _section_flow_constants(self) -> Dict[str, Any]:
        lt, est = self.config.limit_tests, self.config.estimators
        flows = self._flow_observables()
        body: Dict[str, Any] = {"normalization": "nu(theta) = E_mu[integral of theta along one flight]"}
        if lt.flow_psi is not None:
            psi = flows[lt.flow_psi]
            if psi.exact_flow_integral is None:
                raise ConfigInvalid(f"flow_observables.{lt.flow_psi}: needs a declared flow integral",
                                    field="limit_tests.flow_psi")
            self.results["nu_psi"] = psi.exact_flow_integral
            body["nu_psi"] = psi.exact_flow_integral
        if lt.flow_theta is not None:
            G = FlightIntegratedObservable(flows[lt.flow_theta], self._need("table"),
                                           self.config.table.quadrature_order)
            rep = self._green_kubo(G, est.green_kubo_trajectories, est.green_kubo_window)
            self.results["sigma_G"] = (rep.value, rep.stderr)
            body["sigma_tilde_sq_G"] = {"observable": G.name, **rep.to_dict()}
        return body

    def _section_flow_tests(self) -> Dict[str, Any]:
        run = self._need("run:flow")
        lt = self.config.limit_tests
        phi = self._phi0_value()
        nu = self.results.get("nu_psi", 0.0)
        sigma_sq, sigma_se = self.results.get("sigma_G", (None, 0.0))
        psi = lt.flow_psi if "nu_psi" in self.results else None
        theta = lt.flow_theta if sigma_sq is not None else None
        out = flow_tests(run, theta, psi, nu, phi, sigma_sq, sigma_se, self.config.estimators.batches)
        body = {"normalization": out["normalization"]}
        if "exponential" in out:
            body["exponential"] = self._law_section("exponential_flow", out["exponential"])
            final = out["exponential"].reports[-1]
            mean = final.moments["mean"]
            expected = nu * phi
            score = abs(mean["value"] - expected) / mean["stderr"] if mean["stderr"] else math.inf
            self._check("flow.exponential_mean", score <= self.config.thresholds.z, score,
                        self.config.thresholds.z, expected=expected, observed=mean["value"])
        if "laplace" in out:
            body["laplace"] = self._law_section("laplace_flow", out["laplace"])
        return body

    # ==========================================
    # oracle
    # ==========================================
    def _plan_oracle(self):
        self._enqueue("chain", self._section_chain)
        for name in self.config.oracle.spectral_chains:
            self._enqueue(f"spectral:{name}", lambda name=name: self._section_spectral(name))
        self._enqueue("local_limit_rate", self._section_local_rate)
        self._enqueue("green_function", self._section_green)
        self._enqueue("local_time_law", self._section_local_time_law)
        self._enqueue("simulation", self._section_simulation)
        self._enqueue("exponential", self._section_oracle_exponential)
        self._enqueue("laplace", self._section_oracle_laplace)
        self._enqueue("observable_laws", self._section_observable_laws)
        if self.config.oracle.coboundary is not None:
            self._enqueue("coboundary", self._section_coboundary)

    def _section_chain(self) -> Dict[str, Any]:
        chain = chain_from_config(dict(self.config.oracle.chain))
        self.results["chain"] = chain
        sigma = sigma_sq_exact(chain)
        return {**chain.to_dict(), "pi": chain.pi.tolist(), "sigma_sq": sigma.tolist(),
                "phi0": phi0_exact(chain), "row_identical": chain.row_identical}

    def _section_spectral(self, name: str) -> Dict[str, Any]:
        if name not in BUILTIN_CHAINS:
            raise ConfigInvalid(f"oracle.spectral_chains: unknown chain '{name}'", field="oracle.spectral_chains")
        chain = BUILTIN_CHAINS[name]({})
        oc, th = self.config.oracle, self.config.thresholds
        spec = twisted_spectrum(chain, oc.points, oc.gap_threshold)
        body = spec.to_dict()
        exact = sigma_sq_exact(chain)
        sigma_err = float(np.max(np.abs(spec.sigma_sq_spec - exact)))
        body["sigma_sq_exact"] = exact.tolist()
        body["sigma_sq_error"] = sigma_err
        self._check(f"spectral.{name}.sigma_sq", sigma_err <= th.sigma_tol, sigma_err, th.sigma_tol)
        if name == "lazy_walk":
            err = spec.closed_form_error(lazy_walk_eigenvalue)
            body["closed_form_error"] = err
            self._check(f"spectral.{name}.closed_form", err <= th.spectral_tol, err, th.spectral_tol)
        self._check(f"spectral.{name}.decomposition_rate", spec.decomposition_rate < th.decomposition_rate,
                    spec.decomposition_rate, th.decomposition_rate)
        return body

    def _section_local_rate(self) -> Dict[str, Any]:
        chain = self._need("chain")
        oc, th = self.config.oracle, self.config.thresholds
        rate = local_limit_rate(chain, oc.ells, dp_limit=oc.dp_limit)
        self._table("local_limit_rate", ["ell", "sup_error", "ell_p_origin"],
                    [{"ell": e, "sup_error": err, "ell_p_origin": s}
                     for e, err, s in zip(rate.ells, rate.errors, rate.scaled_origin)])
        rel = abs(rate.scaled_origin[-1] - rate.phi0) / rate.phi0
        self._check("local_limit.slope", rate.slope <= th.local_slope, rate.slope, th.local_slope)
        self._check("local_limit.origin", rel <= th.local_phi0_rel, rel, th.local_phi0_rel, ell=rate.ells[-1])
        return rate.to_dict()

    def _section_green(self) -> Dict[str, Any]:
        chain = self._need("chain")
        gf = green_function(chain, self.config.oracle.green_n, self.config.oracle.exact_upto)
        self._table("green_function", ["n", "expected_visits", "phi0_log_n"],
                    [{"n": n, "expected_visits": v, "phi0_log_n": gf.phi0 * math.log(n)}
                     for n, v in zip(gf.n_values, gf.expected_visits)])
        return gf.to_dict()

    def _section_local_time_law(self) -> Dict[str, Any]:
        chain = self._need("chain")
        oc = self.config.oracle
        ns = sorted({n for n in oc.local_n if n <= oc.exact_recursion_limit} | {oc.exact_recursion_limit})
        laws = [exact_local_time_law(chain, n, oc.exact_recursion_limit) for n in ns]
        rows = [{"n": law.n, "k": k, "probability": float(p)} for law in laws for k, p in enumerate(law.pmf)
                if p > 0.0]
        self._table("local_time_law", ["n", "k", "probability"], rows)
        return {"laws": [law.to_dict() for law in laws],
                "ks_trend": [law.ks_exponential for law in laws]}

    def _section_simulation(self) -> Dict[str, Any]:
        chain = self._need("chain")
        oc = self.config.oracle
        out = simulate_birkhoff(chain, oc.local_n, oc.trajectories, self.config.seed,
                                self.config.sampling.chunk_size, self.pool)
        run = ensemble_from_arrays({"local_time": out["local_time"], "mark_sum": out["mark_sum"]},
                                   out["n_values"].tolist(), self.config.seed)
        self.results["oracle_run"] = run
        return run.summary()

    def _section_oracle_exponential(self) -> Dict[str, Any]:
        run, chain = self._need("oracle_run", "chain")
        series = exponential_test(run, "local_time", 1.0, phi0_exact(chain), self.config.estimators.batches)
        return self._law_section("oracle_exponential", series, self.config.thresholds.ks_exponential)

    def _section_oracle_laplace(self) -> Dict[str, Any]:
        run, chain = self._need("oracle_run", "chain")
        laws = oracle_observable_laws(chain, window=self.config.oracle.law_window, tol=self.config.oracle.tol)
        self.results["oracle_laws"] = laws
        series = laplace_test(run, "mark_sum", phi0_exact(chain), laws.sigma_tilde_sq, 0.0,
                              self.config.estimators.batches)
        th = self.config.thresholds
        body = self._law_section("oracle_laplace", series, th.ks_laplace, th.kurtosis)
        return {"sigma_tilde_sq": laws.sigma_tilde_sq, **body}

    def _section_observable_laws(self) -> Dict[str, Any]:
        chain = self._need("chain")
        oc = self.config.oracle
        laws = oracle_observable_laws(chain, window=oc.law_window, tol=oc.tol, excursions=oc.excursions,
                                      seed=self.config.seed, lag_window=self.config.estimators.induced_window,
                                      batches=self.config.estimators.batches)
        if laws.sigma_hat_sq is not None and laws.sigma_hat_stderr is not None:
            gap = abs(laws.sigma_hat_sq - laws.sigma_tilde_sq)
            bound = self.config.thresholds.z * laws.sigma_hat_stderr
            self._check("oracle.variance_equivalence", gap <= max(bound, 1e-12), gap, bound)
        return laws.to_dict()

    def _section_coboundary(self) -> Dict[str, Any]:
        chain = self._need("chain")
        oc = self.config.oracle
        v = np.asarray(oc.coboundary, dtype=float)
        if len(v) != chain.size:
            raise ConfigInvalid(f"oracle.coboundary: needs {chain.size} values", field="oracle.coboundary")
        res = coboundary_laws(chain, v, excursions=oc.excursions, seed=self.config.seed,
                              lag_window=self.config.estimators.induced_window,
                              batches=self.config.estimators.batches)
        return res.to_dict()

    # ==========================================
    # moments
    # ==========================================
    def _plan_moments(self):
        self._enqueue("identities", self._section_identities)
        self._enqueue("sampler", self._section_sampler)
        self._enqueue("lattice_sums", self._section_lattice_sums)

    def _section_identities(self) -> Dict[str, Any]:
        report = verify_moments(self.config.moments.max_m, pool=self.pool)
        self._table("admissible", CSV_COLUMNS, report.admissible_rows)
        self._table("brute_force", ["m", "N", "cN", "brute", "passed"], report.brute_force)
        self._check("moments.identities", report.passed,
                    sum(not r["passed"] for r in report.brute_force + report.group_counts
                        + report.moments + report.odd_moments), 0, max_m=report.max_m)
        return report.to_dict()

    def _section_sampler(self) -> Dict[str, Any]:
        mc = self.config.moments
        rows = sampler_moment_check(mc.sampler_phi0, mc.sampler_sigma, mc.sampler_alpha, mc.sampler_beta,
                                    mc.sampler_count, stream(self.config.seed, STREAM_CONTROL))
        self._table("sampler_moments", ["m", "empirical", "stderr", "closed", "passed"], rows)
        low = [r for r in rows if r["m"] <= 4]
        self._check("moments.sampler", all(r["passed"] for r in low),
                    [r["empirical"] for r in low], [r["closed"] for r in low])
        return {"rows": rows}

    def _section_lattice_sums(self) -> Dict[str, Any]:
        mc = self.config.moments
        rows = lattice_sum_ratio(mc.lattice_q, mc.lattice_n)
        self._table("lattice_sums", ["q", "n", "sum", "ratio"], rows)
        return {"rows": rows}
