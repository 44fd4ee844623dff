import pytest

from doubleecho.config import Settings, derive_seed, parse_otlp_headers, parse_session_key
from doubleecho.errors import ConfigError

ENV_VARS = (
    "DOUBLEECHO_LOG_LEVEL",
    "DOUBLEECHO_SEED",
    "DOUBLEECHO_SWEEP_AMPLITUDE",
    "DOUBLEECHO_SESSION_KEY",
    "DOUBLEECHO_N_JOBS",
    "DOUBLEECHO_TRACE_CONSOLE",
    "DOUBLEECHO_SPAN_FILTER_PATTERNS",
    "OTEL_EXPORTER_OTLP_ENDPOINT",
    "OTEL_EXPORTER_OTLP_HEADERS",
)


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ENV_VARS:
        monkeypatch.delenv(name, raising=False)


def test_defaults_without_environment():
    settings = Settings.from_env()
    assert settings == Settings()
    assert settings.session_key is None
    assert settings.n_jobs == 1


def test_values_are_read_from_environment(monkeypatch):
    monkeypatch.setenv("DOUBLEECHO_LOG_LEVEL", "debug")
    monkeypatch.setenv("DOUBLEECHO_SEED", "42")
    monkeypatch.setenv("DOUBLEECHO_SWEEP_AMPLITUDE", "0.25")
    monkeypatch.setenv("DOUBLEECHO_SESSION_KEY", "ab" * 32)
    monkeypatch.setenv("DOUBLEECHO_N_JOBS", "4")
    monkeypatch.setenv("DOUBLEECHO_TRACE_CONSOLE", "yes")
    monkeypatch.setenv("DOUBLEECHO_SPAN_FILTER_PATTERNS", "^simulator\\., classifier.fold ,")
    monkeypatch.setenv("OTEL_EXPORTER_OTLP_ENDPOINT", "http://localhost:4318/v1/traces")
    monkeypatch.setenv("OTEL_EXPORTER_OTLP_HEADERS", "x-api-key=secret")

    settings = Settings.from_env()
    assert settings.log_level == "DEBUG"
    assert settings.master_seed == 42
    assert settings.sweep_amplitude == 0.25
    assert settings.session_key == b"\xab" * 32
    assert settings.n_jobs == 4
    assert settings.trace_console is True
    assert settings.span_filter_patterns == ["^simulator\\.", "classifier.fold"]
    assert settings.otlp_endpoint == "http://localhost:4318/v1/traces"
    assert settings.otlp_headers == {"x-api-key": "secret"}


@pytest.mark.parametrize("name,value", [
    ("DOUBLEECHO_SEED", "twelve"),
    ("DOUBLEECHO_SWEEP_AMPLITUDE", "2.0"),
    ("DOUBLEECHO_N_JOBS", "0"),
    ("DOUBLEECHO_SESSION_KEY", "zz"),
    ("DOUBLEECHO_SESSION_KEY", "abcd"),
])
def test_invalid_values_raise_config_error(monkeypatch, name, value):
    monkeypatch.setenv(name, value)
    with pytest.raises(ConfigError):
        Settings.from_env()


def test_session_key_errors_do_not_echo_the_key():
    with pytest.raises(ConfigError) as error:
        parse_session_key("0123" * 8)
    assert "0123" not in str(error.value)


def test_otlp_headers_accept_both_separators():
    assert parse_otlp_headers("a=1, b: 2, junk") == {"a": "1", "b": "2"}
    assert parse_otlp_headers("") == {}


def test_derive_seed_depends_on_every_key():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
    assert derive_seed(0, 1, 2) != derive_seed(0, 2, 1)
    assert derive_seed(0, 1) != derive_seed(1, 1)
    assert len({derive_seed(5, room) for room in range(100)}) == 100
