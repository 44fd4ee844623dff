"""Runtime settings read from the environment (and an optional ``.env`` file).

Every value has a default, so the package works without any configuration.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
from dotenv import load_dotenv

from doubleecho.errors import ConfigError

load_dotenv()

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

SESSION_KEY_BYTES = 32


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"{name} must be an integer, got {raw!r}") from e


def _env_float(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return float(raw)
    except ValueError as e:
        raise ConfigError(f"{name} must be a number, got {raw!r}") from e


def _env_flag(name: str, default: bool = False) -> bool:
    raw = os.getenv(name)
    if raw is None:
        return default
    return raw.strip().lower() in ("true", "1", "yes")


def parse_session_key(raw: str) -> bytes:
    """Decode a hex session key and check its length."""
    try:
        key = bytes.fromhex(raw.strip())
    except ValueError as e:
        raise ConfigError("session key must be hex encoded") from e
    if len(key) != SESSION_KEY_BYTES:
        raise ConfigError(f"session key must be {SESSION_KEY_BYTES} bytes, got {len(key)}")
    return key


def parse_otlp_headers(env_headers: str) -> dict[str, str]:
    """Parse ``key1=value1,key2: value2`` into a header dict."""
    headers: dict[str, str] = {}
    for header_pair in env_headers.split(","):
        header_pair = header_pair.strip()
        if "=" in header_pair:
            key, value = header_pair.split("=", 1)
        elif ":" in header_pair:
            key, value = header_pair.split(":", 1)
        else:
            continue
        headers[key.strip()] = value.strip()
    return headers


@dataclass(frozen=True)
class Settings:
    log_level: str = "INFO"
    master_seed: int = 0
    sweep_amplitude: float = 0.5
    session_key: bytes | None = None
    n_jobs: int = 1
    trace_console: bool = False
    span_filter_patterns: list[str] = field(default_factory=list)
    otlp_endpoint: str | None = None
    otlp_headers: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_env(cls) -> Settings:
        raw_key = os.getenv("DOUBLEECHO_SESSION_KEY")
        session_key = parse_session_key(raw_key) if raw_key else None

        amplitude = _env_float("DOUBLEECHO_SWEEP_AMPLITUDE", 0.5)
        if not 0.0 <= amplitude <= 1.0:
            raise ConfigError(f"DOUBLEECHO_SWEEP_AMPLITUDE must lie in [0, 1], got {amplitude}")

        n_jobs = _env_int("DOUBLEECHO_N_JOBS", 1)
        if n_jobs < 1:
            raise ConfigError(f"DOUBLEECHO_N_JOBS must be at least 1, got {n_jobs}")

        patterns_str = os.getenv("DOUBLEECHO_SPAN_FILTER_PATTERNS", "")
        return cls(
            log_level=os.getenv("DOUBLEECHO_LOG_LEVEL", "INFO").upper(),
            master_seed=_env_int("DOUBLEECHO_SEED", 0),
            sweep_amplitude=amplitude,
            session_key=session_key,
            n_jobs=n_jobs,
            trace_console=_env_flag("DOUBLEECHO_TRACE_CONSOLE"),
            span_filter_patterns=[p.strip() for p in patterns_str.split(",") if p.strip()],
            otlp_endpoint=os.getenv("OTEL_EXPORTER_OTLP_ENDPOINT") or None,
            otlp_headers=parse_otlp_headers(os.getenv("OTEL_EXPORTER_OTLP_HEADERS", "")),
        )


def derive_seed(seed: int, *keys: int) -> int:
    """Mix a master seed with integer keys (room, session, device, ...).

    The result only depends on the key values, never on the order in which
    callers ask for seeds.
    """
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])
