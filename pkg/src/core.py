import sys
import os
import json
import hashlib
import logging
from typing import Dict, Any, Optional

from PySide6.QtCore import QMutex

# ==========================================
# Feature Flags & Imports
# ==========================================
try:
    import numpy as np
except ImportError:
    logging.critical("'numpy' library is missing. Run: pip install numpy")
    sys.exit(1)

try:
    import scipy
except ImportError:
    logging.critical("'scipy' library is missing. Run: pip install scipy")
    sys.exit(1)

# ==========================================
# Constants & Paths
# ==========================================
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIG_FILE = os.path.join(BASE_DIR, "configs", "default.json")
LOG_DIR = os.path.join(BASE_DIR, "logs")
DEFAULT_OUT_DIR = os.path.join(BASE_DIR, "runs")

# Geometry tolerances
TANGENCY_EPS = 1e-12
BOUNDARY_TOL = 1e-9
DEFAULT_FLIGHT_CAP = 50.0
DEFAULT_HORIZON_MARGIN = 0.05
DEFAULT_PROBE_POINTS = 10000
DEFAULT_PROBE_DIRECTIONS = 10000

# Estimator defaults
GL_ORDER = 8
BATCH_COUNT = 64
LAG_CAP = 200
RETURN_CAP = 10 ** 10
CHUNK_SIZE = 4096

# Oracle eigen-solver
POWER_TOL = 1e-13
POWER_MAX_ITER = 5000

# Exit codes
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_THRESHOLD = 4

# ==========================================
# Errors
# ==========================================
class LabError(Exception):
    """Base of every error the lab raises. `code` is stable and lands in reports."""
    exit_code = EXIT_NUMERIC

    def __init__(self, message: str = "", **details):
        super().__init__(message)
        self.details = details

    @property
    def code(self) -> str:
        return type(self).__name__

    def to_dict(self) -> Dict[str, Any]:
        return {"error": self.code, "message": str(self), "details": self.details}


class ConfigInvalid(LabError):
    exit_code = EXIT_CONFIG

# --- geometry ---
class TableInvalid(LabError): pass
class OverlapError(LabError): pass
class HorizonSuspect(LabError): pass
class NotIncoming(LabError): pass
class OffBoundary(LabError): pass
class NumericalTangency(LabError): pass
class FlightCapExceeded(LabError): pass

# --- dynamics / observables ---
class QuadratureUnstable(LabError): pass
class ReturnCapExceeded(LabError): pass
class RetryBudgetExhausted(LabError): pass

# --- estimators / tests ---
class WindowTooSmall(LabError): pass
class NotCentered(LabError): pass
class DegenerateMatrix(LabError): pass
class VarianceDegenerate(LabError): pass
class InsufficientBins(LabError): pass

# --- oracle ---
class ChainInvalid(LabError): pass
class GapCollapse(LabError): pass
class TruncationError(LabError): pass
class TailNotCertified(LabError): pass

# --- moments ---
class CompositionMismatch(LabError): pass
class MismatchDetected(LabError): pass

# --- reporting ---
class ReportIoError(LabError): pass

class AcceptanceFailure(LabError):
    exit_code = EXIT_THRESHOLD

# ==========================================
# Helper Classes
# ==========================================
class QMutexWithLocker:
    def __init__(self, mutex: QMutex):
        self.mutex = mutex
    def __enter__(self):
        self.mutex.lock()
    def __exit__(self, exc_type, exc_value, traceback):
        self.mutex.unlock()

# ==========================================
# Config Management
# ==========================================
def load_config(config_path: str = CONFIG_FILE) -> Dict[str, Any]:
    """Loads a JSON document. Unreadable or malformed files are config errors."""
    if not os.path.exists(config_path):
        raise ConfigInvalid(f"config: file not found: {config_path}")
    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        logging.error(f"[Config] 加载配置失败: {e}")
        raise ConfigInvalid(f"config: unreadable JSON ({e})") from e
    if not isinstance(data, dict):
        raise ConfigInvalid("config: top level must be an object")
    return data

def save_config(data: Dict[str, Any], config_path: str):
    """Saves the configuration dict to JSON file."""
    try:
        folder = os.path.dirname(config_path)
        if folder and not os.path.exists(folder):
            os.makedirs(folder)
        with open(config_path, "w", encoding='utf-8') as f:
            json.dump(data, f, indent=2, ensure_ascii=False)
    except OSError as e:
        logging.error(f"[Config] 保存配置失败: {e}")
        raise ReportIoError(f"cannot write {config_path}: {e}") from e

def calculate_sha256(path: str) -> str:
    """SHA-256 of a file, uppercase hex."""
    sha256 = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1048576), b""):
                sha256.update(chunk)
        return sha256.hexdigest().upper()
    except OSError as e:
        logging.error(f"[Config] Hash calculation error: {e}")
        return ""

def as_float_or_none(value: Optional[float]) -> Optional[float]:
    """JSON-safe float: NaN and infinities become None."""
    if value is None:
        return None
    value = float(value)
    if value != value or value in (float("inf"), float("-inf")):
        return None
    return value
