import json
import logging
import os

import pytest

from src.cli import build_parser, run
from src.controllers.experiment_controller import ExperimentController
from src.services.config_service import ConfigService, RunConfig, parse_config


def _write(path, data):
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def _report(out, subcommand):
    with open(os.path.join(out, subcommand, "report.json"), encoding="utf-8") as f:
        return json.load(f)


def test_moments_subcommand_writes_artifacts(tmp_path, caplog):
    cfg = _write(tmp_path / "run.json", {"moments": {"sampler_count": 20000, "lattice_n": [100]}})
    out = str(tmp_path / "runs")
    with caplog.at_level(logging.INFO):
        rc = run(["moments", "--config", cfg, "--out", out, "--max-m", "4", "--seed", "0x2a"])
    assert rc in (0, 4)
    assert "section 'identities' started (2 remaining)" in caplog.text

    report = _report(out, "moments")
    assert report["subcommand"] == "moments"
    assert report["status"] == "ok"
    assert report["seed"] == 42
    assert set(report["sections"]) == {"identities", "sampler", "lattice_sums"}
    checks = {c["check"]: c for c in report["checks"]}
    assert checks["moments.identities"]["passed"]
    assert report["acceptance"]["passed"] == (rc == 0)
    assert os.path.exists(os.path.join(out, "moments", "tables", "admissible.csv"))

    with open(os.path.join(out, "moments", "manifest.json"), encoding="utf-8") as f:
        manifest = json.load(f)
    assert manifest["config"]["moments"]["max_m"] == 4
    assert manifest["overrides"] == {"seed": 42, "out": out, "max_m": 4}
    assert manifest["config_hash"] == report["config_hash"]
    assert ConfigService.from_manifest(os.path.join(out, "moments", "manifest.json")).seed == 42


def test_bad_config_exits_with_config_code(tmp_path):
    cfg = _write(tmp_path / "bad.json",
                 {"table": {"obstacles": [{"center": [0, 0], "radius": 0.4}, {"center": [0.5, 0.5]}]}})
    assert run(["validate", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert run(["estimate", "--config", str(tmp_path / "missing.json")]) == 2
    assert not os.path.exists(tmp_path / "validate")


def test_parser_rejects_bad_seed():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["moments", "--seed", "-3"])
    with pytest.raises(SystemExit):
        build_parser().parse_args(["oracle", "--threads", "0"])


def test_init_config_writes_defaults(tmp_path):
    path = str(tmp_path / "configs" / "default.json")
    assert run(["init-config", path]) == 0
    config, digest = ConfigService.load(path)
    assert config == RunConfig()
    assert digest


def test_oracle_controller_on_small_chain(tmp_path):
    config = parse_config({
        "oracle": {"points": 21, "ells": [8, 16, 32], "green_n": [20, 40], "exact_upto": 50,
                   "local_n": [20, 40], "trajectories": 500, "exact_recursion_limit": 60,
                   "law_window": 30, "spectral_chains": ["lazy_walk"]},
        "output": str(tmp_path),
        "threads": 2,
    })
    controller = ExperimentController(config, "HASH")
    rc = controller.run("oracle")
    assert rc in (0, 4)
    report = _report(str(tmp_path), "oracle")
    assert report["status"] == "ok"
    assert report["sections"]["chain"]["name"] == "marked_lazy_walk"
    checks = {c["check"]: c["passed"] for c in report["checks"]}
    assert checks["spectral.lazy_walk.closed_form"]
    assert checks["spectral.lazy_walk.sigma_sq"]
    assert checks["oracle.variance_equivalence"]
    assert os.path.exists(os.path.join(str(tmp_path), "oracle", "tables", "local_time_law.csv"))


def test_failed_section_marks_report_partial(tmp_path):
    config = parse_config({
        "oracle": {"chain": {"builtin": "levy_flight"}, "spectral_chains": []},
        "output": str(tmp_path),
    })
    rc = ExperimentController(config).run("oracle")
    assert rc == 2
    report = _report(str(tmp_path), "oracle")
    assert report["status"] == "partial"
    assert report["sections"]["chain"]["status"] == "failed"
    assert report["sections"]["chain"]["error"] == "ConfigInvalid"
    assert report["sections"]["green_function"]["status"] == "skipped"


def test_validate_controller_certifies_default_table(tmp_path):
    config = parse_config({
        "table": {"probe_points": 16, "probe_directions": 16},
        "estimators": {"invariance_samples": 20000},
        "sampling": {"record_steps": 30},
        "output": str(tmp_path),
        "threads": 2,
    })
    rc = ExperimentController(config, "HASH").run("validate")
    assert rc in (0, 4)
    report = _report(str(tmp_path), "validate")
    assert report["status"] == "ok"
    assert set(report["sections"]) == {"certificate", "invariance", "trajectory"}
    cert = report["sections"]["certificate"]["certificate"]
    assert cert["heuristic"] and cert["tau_max"] >= cert["tau_probe_max"]
    assert report["sections"]["trajectory"]["cell_consistency"]
    with open(os.path.join(str(tmp_path), "validate", "tables", "trajectory.csv"), encoding="utf-8") as f:
        assert len(f.read().splitlines()) == 31
