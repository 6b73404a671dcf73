"""
Lab-wide settings.

Operator-facing values can be overridden from the environment (or a local
.env file) without touching code: VCGLAB_OUTPUT_DIR, VCGLAB_LOG_LEVEL,
VCGLAB_WORKERS, VCGLAB_AUDIT_BUDGET, VCGLAB_MC_SAMPLES.
"""
import os
import logging

from dotenv import load_dotenv

from exceptions import ConfigError

load_dotenv()


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"Environment variable {name} must be an integer, got {raw!r}")


LAB_VERSION = "0.4.0"

# Output
OUTPUT_DIR = os.getenv("VCGLAB_OUTPUT_DIR", "results")
CSV_FLOAT_FORMAT = "%.15g"

# Logging
LOGGING_LEVEL = getattr(logging, os.getenv("VCGLAB_LOG_LEVEL", "INFO").upper(), logging.INFO)
LOGGING_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'

# Exact-table arithmetic
PROB_TOL = 1e-12
TIE_TOL = 1e-12
TABLE_CHECK_LIMIT = 2_000_000

# Audits
ZERO_REGRET_TOL = 1e-9
MC_SE_MULTIPLIER = 3.0
AUDIT_BUDGET = _env_int("VCGLAB_AUDIT_BUDGET", 20_000_000)
DEFAULT_WORKERS = _env_int("VCGLAB_WORKERS", 1)

# Estimators
DEFAULT_MC_SAMPLES = _env_int("VCGLAB_MC_SAMPLES", 200)
DEFAULT_RATE_KAPPA = 0.4
EXACT_SUPPORT_LIMIT = 50_000

# Simplex oracle
SIMPLEX_ORACLE_STEP = 1e-3
