"""Room impulse response recovery from an excitation/recording pair."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Literal

import numpy as np
from scipy import fft as spfft

from doubleecho.errors import DegenerateSignalError, ParameterError
from doubleecho.signal import AudioSignal

logger = logging.getLogger(__name__)

DeconvolutionMethod = Literal["matched_filter", "regularized_inverse"]

PRE_PEAK_SECONDS = 0.1
WINDOW_SECONDS = 0.85
NOISE_WINDOW_SECONDS = 0.01
NOISE_FLOOR_SENTINEL_DB = -120.0
# Argument floor for every dB conversion.
DB_FLOOR = 1e-12


def power_db(ratio):
    """10·log10 of an energy ratio, clamped so silence maps to -120 dB."""
    return 10.0 * np.log10(np.maximum(ratio, DB_FLOOR))


@dataclass(frozen=True, eq=False)
class ImpulseResponse:
    """An extracted RIR with its direct-sound position and noise-floor estimate.

    ``noise_floor_db`` is relative to the direct-sound peak energy.
    """

    samples: np.ndarray
    sample_rate: int
    direct_index: int
    noise_floor_db: float = NOISE_FLOOR_SENTINEL_DB

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64)
        if samples.ndim != 1 or len(samples) == 0:
            raise ParameterError("impulse response samples must be a non-empty 1-D array")
        if self.sample_rate <= 0:
            raise ParameterError(f"sample_rate must be positive, got {self.sample_rate}")
        if not 0 <= self.direct_index < len(samples):
            raise ParameterError(f"direct_index {self.direct_index} outside [0, {len(samples)})")
        if self.noise_floor_db > 0:
            raise ParameterError(f"noise_floor_db must be <= 0, got {self.noise_floor_db}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    def with_samples(self, samples: np.ndarray) -> ImpulseResponse:
        return ImpulseResponse(samples, self.sample_rate, self.direct_index, self.noise_floor_db)

    def scaled(self, gain: float) -> ImpulseResponse:
        return self.with_samples(self.samples * gain)

    def to_dict(self, include_samples: bool = True) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "sample_rate": self.sample_rate,
            "direct_index": self.direct_index,
            "noise_floor_db": float(self.noise_floor_db),
            "length": len(self.samples),
        }
        if include_samples:
            payload["samples"] = self.samples.tolist()
        return payload


def deconvolve(
    recording: AudioSignal,
    excitation: AudioSignal,
    method: DeconvolutionMethod = "matched_filter",
    epsilon: float = 1e-8,
) -> AudioSignal:
    """Recover the channel between ``excitation`` and ``recording``.

    ``matched_filter`` correlates with the excitation (time-reversed
    convolution) and divides by its energy. ``regularized_inverse`` divides by
    ``|S|² + epsilon·max|S|²``. Both run at a linear-convolution FFT length and
    return the causal lags ``[0, len(recording))``.
    """
    if recording.sample_rate != excitation.sample_rate:
        raise ParameterError(
            f"sample rate mismatch: {recording.sample_rate} Hz vs {excitation.sample_rate} Hz"
        )
    if len(recording) == 0 or len(excitation) == 0:
        raise ParameterError("deconvolve needs non-empty signals")
    energy = float(np.sum(excitation.samples**2))
    if energy == 0.0:
        raise DegenerateSignalError("excitation is all zeros")

    n = len(recording) + len(excitation) - 1
    nfft = spfft.next_fast_len(n, real=True)
    R = spfft.rfft(recording.samples, nfft)
    S = spfft.rfft(excitation.samples, nfft)

    if method == "matched_filter":
        H = R * np.conj(S) / energy
    elif method == "regularized_inverse":
        power = np.abs(S) ** 2
        H = R * np.conj(S) / (power + epsilon * float(power.max()))
    else:
        raise ParameterError(f"unknown deconvolution method {method!r}")

    raw = spfft.irfft(H, nfft)[:len(recording)]
    return AudioSignal(raw, recording.sample_rate)


def estimate_noise_floor(raw: AudioSignal, direct_index: int) -> float:
    """Mean energy of the 10 ms before the direct sound, in dB re the peak energy."""
    if direct_index < 0:
        raise ParameterError(f"direct_index must be non-negative, got {direct_index}")
    samples = raw.samples
    n_window = round(NOISE_WINDOW_SECONDS * raw.sample_rate)
    window = samples[max(0, direct_index - n_window):direct_index]
    if len(window) == 0 or direct_index >= len(samples):
        return NOISE_FLOOR_SENTINEL_DB
    peak_energy = float(samples[direct_index] ** 2)
    if peak_energy == 0.0:
        return 0.0
    level = float(power_db(np.mean(window**2) / peak_energy))
    return min(level, 0.0)


def extract_linear_rir(raw: AudioSignal) -> ImpulseResponse:
    """Cut a fixed 0.85 s window around the strongest peak of ``raw``.

    The window starts 100 ms before the peak and is zero-padded where ``raw``
    runs out, so the output length depends only on the sample rate.
    """
    if len(raw) == 0:
        raise ParameterError("raw response is empty")
    magnitude = np.abs(raw.samples)
    peak = int(np.argmax(magnitude))
    if magnitude[peak] == 0.0:
        raise DegenerateSignalError("raw response is all zeros")

    sr = raw.sample_rate
    length = round(WINDOW_SECONDS * sr)
    pre = round(PRE_PEAK_SECONDS * sr)

    window = np.zeros(length)
    src_start = max(0, peak - pre)
    src_stop = min(len(raw), peak - pre + length)
    dst_start = src_start - (peak - pre)
    window[dst_start:dst_start + (src_stop - src_start)] = raw.samples[src_start:src_stop]

    noise_floor_db = estimate_noise_floor(raw, peak)
    logger.debug(f"Direct peak at sample {peak}, noise floor {noise_floor_db:.1f} dB")
    return ImpulseResponse(window, sr, pre, noise_floor_db)
