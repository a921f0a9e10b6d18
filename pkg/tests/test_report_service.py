import json
import math

import numpy as np
import pytest

from src.core import ReportIoError
from src.services.report_service import ReportService, clean, emit_report


def test_clean_makes_values_json_safe():
    data = {"a": np.float64("nan"), "b": np.arange(3), "c": np.bool_(True), 1: math.inf,
            "d": (np.int32(4), 0.5)}
    assert clean(data) == {"a": None, "b": [0, 1, 2], "c": True, "1": None, "d": [4, 0.5]}


def test_tables_leave_missing_values_empty(tmp_path):
    service = ReportService(str(tmp_path), "estimate")
    path = service.write_csv("lags", ["k", "value"], [{"k": 0, "value": 0.25}, {"k": 1, "value": float("nan")},
                                                     {"k": 2}])
    assert path.endswith("estimate/tables/lags.csv")
    with open(path, encoding="utf-8") as f:
        assert f.read().splitlines() == ["k,value", "0,0.25", "1,", "2,"]


def test_emit_report_writes_manifest_last(tmp_path):
    service = ReportService(str(tmp_path), "moments")
    tables = {"b": {"columns": ["x"], "rows": [{"x": 1}]}, "a": {"columns": ["y"], "rows": []}}
    written = emit_report(service, {"status": "ok", "value": np.float32(1.5)}, tables,
                          config={"seed": 1}, config_hash="ABC", seed=1, started=0.0, finished=2.5,
                          status="ok")
    assert [p.split("moments/")[-1] for p in written] == ["report.json", "tables/a.csv", "tables/b.csv",
                                                        "manifest.json"]
    with open(written[-1], encoding="utf-8") as f:
        manifest = json.load(f)
    assert manifest["files"] == ["report.json", "tables/a.csv", "tables/b.csv"]
    assert manifest["wall_time_s"] == 2.5
    assert set(manifest["versions"]) == {"python", "numpy", "scipy", "PySide6"}
    assert manifest["config"] == {"seed": 1}


def test_unwritable_output_raises(tmp_path):
    blocked = tmp_path / "blocked"
    blocked.write_text("", encoding="utf-8")
    with pytest.raises(ReportIoError):
        ReportService(str(blocked), "validate").write_json("report.json", {})
