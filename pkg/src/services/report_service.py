import os
import csv
import json
import math
import logging
import platform
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import scipy
import PySide6

from ..core import ReportIoError


def clean(value: Any) -> Any:
    """JSON-safe copy: numpy scalars and arrays become Python values, NaN and ±inf become None."""
    if hasattr(value, "to_dict") and callable(value.to_dict):
        return clean(value.to_dict())
    if isinstance(value, dict):
        return {str(k): clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return clean(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return repr(value) if math.isfinite(value) else ""
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


class ReportService:
    """Writes <out>/<subcommand>/report.json, tables/*.csv and manifest.json."""

    def __init__(self, out_dir: str, subcommand: str):
        self.root = os.path.join(out_dir, subcommand)
        self.tables_dir = os.path.join(self.root, "tables")
        self.written: List[str] = []

    def _ensure(self, folder: str):
        try:
            os.makedirs(folder, exist_ok=True)
        except OSError as e:
            logging.error(f"[ReportService] 无法创建目录 {folder}: {e}")
            raise ReportIoError(f"cannot create {folder}: {e}") from e

    def write_json(self, name: str, data: Dict[str, Any]) -> str:
        self._ensure(self.root)
        path = os.path.join(self.root, name)
        try:
            with open(path, "w", encoding="utf-8") as f:
                json.dump(clean(data), f, indent=2, ensure_ascii=False, allow_nan=False)
                f.write("\n")
        except (OSError, ValueError) as e:
            logging.error(f"[ReportService] 写入失败 {path}: {e}")
            raise ReportIoError(f"cannot write {path}: {e}") from e
        self.written.append(path)
        logging.info(f"[ReportService] wrote {path}")
        return path

    def write_csv(self, name: str, columns: Sequence[str], rows: Iterable[Dict[str, Any]]) -> str:
        self._ensure(self.tables_dir)
        path = os.path.join(self.tables_dir, name if name.endswith(".csv") else name + ".csv")
        try:
            with open(path, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(columns)
                for row in rows:
                    writer.writerow([_cell(row.get(c)) for c in columns])
        except OSError as e:
            logging.error(f"[ReportService] 写入失败 {path}: {e}")
            raise ReportIoError(f"cannot write {path}: {e}") from e
        self.written.append(path)
        logging.info(f"[ReportService] wrote {path}")
        return path

    def write_manifest(self, config: Dict[str, Any], config_hash: str, seed: int, started: float,
                       finished: float, status: str, overrides: Optional[Dict[str, Any]] = None,
                       config_path: Optional[str] = None) -> str:
        manifest = {
            "status": status,
            "config_path": config_path,
            "config_hash": config_hash,
            "seed": seed,
            "overrides": overrides or {},
            "versions": versions(),
            "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
            "wall_time_s": round(finished - started, 3),
            "files": [os.path.relpath(p, self.root) for p in self.written],
            "config": config,
        }
        return self.write_json("manifest.json", manifest)


def versions() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "PySide6": PySide6.__version__,
    }


def emit_report(service: ReportService, report: Dict[str, Any],
                tables: Dict[str, Dict[str, Any]], **manifest) -> List[str]:
    """Writes report.json, every table ({"columns": [...], "rows": [...]}) and the manifest last."""
    service.write_json("report.json", report)
    for name in sorted(tables):
        service.write_csv(name, tables[name]["columns"], tables[name]["rows"])
    service.write_manifest(**manifest)
    return list(service.written)
