import numpy as np
import pytest
from scipy import signal as sps

from doubleecho.errors import DegenerateSignalError, ParameterError
from doubleecho.rir import (
    NOISE_FLOOR_SENTINEL_DB,
    ImpulseResponse,
    deconvolve,
    estimate_noise_floor,
    extract_linear_rir,
    power_db,
)
from doubleecho.signal import AudioSignal, SweepSpec, generate_sweep, sweep_segment

SR = 44100


@pytest.fixture(scope="module")
def sweep() -> AudioSignal:
    spec = SweepSpec()
    return sweep_segment(generate_sweep(spec), spec)


def _sparse_rir(rng: np.random.Generator) -> np.ndarray:
    h = np.zeros(SR // 2)
    taps = rng.choice(len(h), size=int(rng.integers(1, 11)), replace=False)
    h[taps] = rng.uniform(0.1, 1.0, len(taps)) * rng.choice([-1.0, 1.0], len(taps))
    return h


def _record(sweep: AudioSignal, h: np.ndarray, rng: np.random.Generator | None = None, snr_db: float = 40.0) -> AudioSignal:
    wet = sps.fftconvolve(sweep.samples, h)
    if rng is not None:
        rms = np.sqrt(np.mean(wet**2))
        wet = wet + rng.normal(0.0, rms / 10 ** (snr_db / 20), len(wet))
    return AudioSignal(wet, SR)


def _normalized_correlation(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_matched_filter_recovers_sparse_rirs_at_40_db_snr(sweep):
    for seed in range(50):
        rng = np.random.default_rng(seed)
        h = _sparse_rir(rng)
        raw = deconvolve(_record(sweep, h, rng), sweep, method="matched_filter")
        assert _normalized_correlation(raw.samples[:len(h)], h) >= 0.95, f"seed {seed}"


def test_regularized_inverse_recovers_noise_free_rirs(sweep):
    for seed in range(50):
        rng = np.random.default_rng(seed)
        h = _sparse_rir(rng)
        raw = deconvolve(_record(sweep, h), sweep, method="regularized_inverse")
        assert _normalized_correlation(raw.samples[:len(h)], h) >= 0.99, f"seed {seed}"


def test_deconvolving_the_sweep_with_itself_peaks_at_zero_lag(sweep):
    raw = deconvolve(sweep, sweep)
    assert int(np.argmax(np.abs(raw.samples))) == 0
    assert raw.samples[0] == pytest.approx(1.0)
    assert len(raw) == len(sweep)


@pytest.mark.parametrize("method", ["matched_filter", "regularized_inverse"])
def test_deconvolve_is_linear(sweep, method):
    rng = np.random.default_rng(6)
    n = len(sweep) + 2000
    x = AudioSignal(rng.normal(size=n), SR)
    y = AudioSignal(rng.normal(size=n), SR)
    a, b = 0.7, -2.5
    mixed = deconvolve(AudioSignal(a * x.samples + b * y.samples, SR), sweep, method=method).samples
    separate = a * deconvolve(x, sweep, method=method).samples + b * deconvolve(y, sweep, method=method).samples
    np.testing.assert_allclose(mixed, separate, rtol=0, atol=1e-6 * np.max(np.abs(separate)))


def test_regularized_inverse_recovers_two_taps_in_ratio(sweep):
    h = np.zeros(101)
    h[0], h[100] = 1.0, 0.5
    raw = deconvolve(_record(sweep, h), sweep, method="regularized_inverse", epsilon=1e-8).samples
    assert set(np.argsort(np.abs(raw))[-2:]) == {0, 100}
    assert raw[0] / raw[100] == pytest.approx(2.0, rel=0.01)


def test_deconvolve_rejects_silent_excitation(sweep):
    with pytest.raises(DegenerateSignalError):
        deconvolve(sweep, AudioSignal(np.zeros(100), SR))


def test_deconvolve_rejects_rate_mismatch(sweep):
    with pytest.raises(ParameterError):
        deconvolve(AudioSignal(np.ones(10), 48000), sweep)


def test_deconvolve_rejects_unknown_method(sweep):
    with pytest.raises(ParameterError):
        deconvolve(sweep, sweep, method="wiener")


def test_extract_places_peak_at_100_ms():
    raw = np.zeros(SR)
    raw[20000] = -0.8
    raw[21000] = 0.3
    ir = extract_linear_rir(AudioSignal(raw, SR))
    assert len(ir) == round(0.85 * SR)
    assert ir.direct_index == 4410
    assert ir.samples[4410] == -0.8
    assert ir.samples[4410 + 1000] == 0.3


def test_extract_zero_pads_early_peak():
    raw = np.zeros(SR)
    raw[100] = 1.0
    ir = extract_linear_rir(AudioSignal(raw, SR))
    assert ir.samples[4410] == 1.0
    assert np.all(ir.samples[:4410] == 0.0)
    assert len(ir) == round(0.85 * SR)


def test_extract_all_zero_raises():
    with pytest.raises(DegenerateSignalError):
        extract_linear_rir(AudioSignal(np.zeros(1000), SR))


def test_noise_floor_of_known_pre_peak_noise():
    rng = np.random.default_rng(0)
    raw = rng.normal(0.0, 1e-3, SR)
    raw[10000] = 1.0
    floor = estimate_noise_floor(AudioSignal(raw, SR), 10000)
    assert floor == pytest.approx(-60.0, abs=1.0)


def test_noise_floor_without_pre_peak_window_is_sentinel():
    raw = np.zeros(100)
    raw[0] = 1.0
    assert estimate_noise_floor(AudioSignal(raw, SR), 0) == NOISE_FLOOR_SENTINEL_DB


def test_power_db_floors_silence():
    assert power_db(0.0) == pytest.approx(-120.0)
    assert power_db(1.0) == 0.0


def test_impulse_response_validates_direct_index():
    with pytest.raises(ParameterError):
        ImpulseResponse(np.ones(10), SR, 10)
    with pytest.raises(ParameterError):
        ImpulseResponse(np.ones(10), SR, 0, noise_floor_db=3.0)


def test_impulse_response_dict_omits_samples_on_request():
    ir = ImpulseResponse(np.ones(10), SR, 2, -50.0)
    assert "samples" not in ir.to_dict(include_samples=False)
    assert ir.to_dict()["samples"] == [1.0] * 10
    assert ir.scaled(2.0).samples[0] == 2.0
