#!/usr/bin/env python3

"""
Process-level configuration for the Sparse-Tuning engine.

Values are loaded from environment variables with sensible defaults. Per-run
choices (architecture, sparsification plan, adapters, optimizer) live in the
RunConfig file handled by run_config.py.
"""

import os


class ConfigError(Exception):
    """Raised when an architecture or sparsification setting is inconsistent"""

    pass


def get_env_int(key: str, default: int) -> int:
    """Get integer value from environment variable."""
    value = os.environ.get(key)
    if value is None:
        return default
    try:
        return int(value)
    except ValueError:
        raise ValueError(f"Environment variable {key}={value} is not a valid integer")


def get_env_float(key: str, default: float) -> float:
    """Get float value from environment variable."""
    value = os.environ.get(key)
    if value is None:
        return default
    try:
        return float(value)
    except ValueError:
        raise ValueError(f"Environment variable {key}={value} is not a valid float")


def get_env_str(key: str, default: str) -> str:
    """Get string value from environment variable."""
    return os.environ.get(key, default)


# Logging
LOG_LEVEL = get_env_str("SPTN_LOG_LEVEL", "INFO")

# Metrics exposition (0 disables the HTTP server)
METRICS_PORT = get_env_int("SPTN_METRICS_PORT", 0)

# Engine worker count; more than one evaluates samples of a batch in parallel
WORKERS = get_env_int("SPTN_WORKERS", 1)

# Finite-difference gradient checks
GRADCHECK_EPS = get_env_float("SPTN_GRADCHECK_EPS", 1e-5)
GRADCHECK_RTOL = get_env_float("SPTN_GRADCHECK_RTOL", 1e-4)

# Forward passes per throughput measurement in `bench`
BENCH_REPEATS = get_env_int("SPTN_BENCH_REPEATS", 3)


def get_config_summary() -> str:
    """Return configuration summary for logging."""
    return f"""Sparse-Tuning Engine Configuration:
  Logging:
    - Level: {LOG_LEVEL}

  Engine:
    - Workers: {WORKERS}

  Gradient checks:
    - Finite-difference step: {GRADCHECK_EPS}
    - Relative tolerance: {GRADCHECK_RTOL}

  Benchmark:
    - Repeats per keep rate: {BENCH_REPEATS}

  Observability:
    - Metrics port: {METRICS_PORT}
"""
