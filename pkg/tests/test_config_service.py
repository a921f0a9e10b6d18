import inspect
import json

import pytest

from src.core import CONFIG_FILE, RETURN_CAP, ConfigInvalid, save_config
from src.estimators import induced_variance
from src.geometry import validate_table
from src.services.config_service import ConfigService, RunConfig, parse_config


def test_defaults_fill_every_section():
    config = parse_config({})
    assert config == RunConfig()
    assert len(config.table.obstacles) == 2
    assert config.table.obstacles[0].radius == 0.4
    assert config.ensemble.clock == "map"


def test_probe_grid_and_return_cap_defaults_agree():
    shipped, _ = ConfigService.load(CONFIG_FILE)
    for config in (RunConfig(), shipped):
        assert (config.table.probe_points, config.table.probe_directions) == (10000, 10000)
        assert config.estimators.return_cap == RETURN_CAP == 10 ** 10
    params = inspect.signature(validate_table).parameters
    assert params["probe_points"].default == params["probe_directions"].default == 10000
    assert inspect.signature(induced_variance).parameters["cap"].default == RETURN_CAP


def test_partial_sections_keep_defaults():
    config = parse_config({"ensemble": {"n_values": [100, 10]}, "seed": 9, "threads": 4})
    assert config.ensemble.n_values == (100, 10)
    assert config.ensemble.trajectories == RunConfig().ensemble.trajectories
    assert (config.seed, config.threads) == (9, 4)


@pytest.mark.parametrize("data, field", [
    ({"table": {"obstacles": [{"center": [0, 0], "radius": 0.4}, {"center": [0.5, 0.5]}]}},
     "table.obstacles[1].radius"),
    ({"table": {"obstacles": [{"center": [0, 0], "radius": 0.4}]}}, "table.obstacles"),
    ({"table": {"obstacles": [{"center": [0, 1.5], "radius": 0.4}, {"center": [0.5, 0.5], "radius": 0.1}]}},
     "table.obstacles[0].center"),
    ({"estimators": {"n": 100, "checkpoints": [50, 200]}}, "estimators.checkpoints"),
    ({"ensemble": {"clock": "wall"}}, "ensemble.clock"),
    ({"moments": {"max_m": 13}}, "moments.max_m"),
    ({"seed": -1}, "seed"),
    ({"threads": "many"}, "threads"),
    ({"observables": [{"kind": "g0"}, {"kind": "g0"}]}, "observables[1].name"),
])
def test_invalid_fields_are_named(data, field):
    with pytest.raises(ConfigInvalid) as info:
        parse_config(data)
    assert info.value.details["field"] == field
    assert str(info.value).startswith(field)


def test_missing_radius_message():
    with pytest.raises(ConfigInvalid, match=r"table\.obstacles\[1\]\.radius: required"):
        parse_config({"table": {"obstacles": [{"center": [0, 0], "radius": 0.4}, {"center": [0.5, 0.5]}]}})


def test_load_hashes_the_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 5}), encoding="utf-8")
    config, digest = ConfigService.load(str(path))
    assert config.seed == 5
    assert len(digest) == 64 and digest == digest.upper()

    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigInvalid):
        ConfigService.load(str(bad))
    with pytest.raises(ConfigInvalid):
        ConfigService.load(str(tmp_path / "missing.json"))


def test_overrides_are_validated():
    config = RunConfig()
    out = ConfigService.apply_overrides(config, seed=11, threads=2, out="elsewhere", clock="flow", max_m=6)
    assert (out.seed, out.threads, out.output) == (11, 2, "elsewhere")
    assert out.ensemble.clock == "flow"
    assert out.moments.max_m == 6
    assert config.seed == 0
    with pytest.raises(ConfigInvalid):
        ConfigService.apply_overrides(config, max_m=40)


def test_manifest_round_trip(tmp_path):
    config = parse_config({"seed": 3, "moments": {"max_m": 5}})
    path = tmp_path / "manifest.json"
    save_config({"config": config.to_dict(), "seed": 3}, str(path))
    assert ConfigService.from_manifest(str(path)) == config

    save_config({"seed": 3}, str(tmp_path / "empty.json"))
    with pytest.raises(ConfigInvalid):
        ConfigService.from_manifest(str(tmp_path / "empty.json"))
