"""Excitation sweep generation and recording-side preprocessing.

All functions are pure: they take immutable ``AudioSignal`` values and return
new ones.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np
import soundfile as sf
from scipy import signal as sps

from doubleecho.errors import DegenerateSignalError, ParameterError, TruncationError, WavFormatError

logger = logging.getLogger(__name__)

PCM16_FULL_SCALE = 32767
# Post-sweep reverberation kept by trim().
TRIM_TAIL_SECONDS = 0.5


@dataclass(frozen=True, eq=False)
class AudioSignal:
    """A uniformly sampled mono waveform."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ParameterError(f"samples must be one-dimensional, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ParameterError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ParameterError("samples must be finite")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def scaled(self, gain: float) -> AudioSignal:
        return AudioSignal(self.samples * gain, self.sample_rate)


@dataclass(frozen=True)
class SweepSpec:
    """Linear sine sweep with silence padding on both sides."""

    f_start: float = 0.0
    f_end: float = 22050.0
    sweep_duration: float = 2.0
    lead_silence: float = 1.0
    tail_silence: float = 2.0
    amplitude: float = 0.5
    sample_rate: int = 44100

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ParameterError(f"sample_rate must be positive, got {self.sample_rate}")
        if not 0 <= self.f_start < self.f_end:
            raise ParameterError(f"f_start must satisfy 0 <= f_start < f_end, got f_start={self.f_start}, f_end={self.f_end}")
        if self.f_end > self.sample_rate / 2:
            raise ParameterError(f"f_end={self.f_end} exceeds the Nyquist frequency {self.sample_rate / 2}")
        if self.sweep_duration <= 0:
            raise ParameterError(f"sweep_duration must be positive, got {self.sweep_duration}")
        if self.lead_silence < 0:
            raise ParameterError(f"lead_silence must be non-negative, got {self.lead_silence}")
        if self.tail_silence < 0:
            raise ParameterError(f"tail_silence must be non-negative, got {self.tail_silence}")
        if not 0 <= self.amplitude <= 1:
            raise ParameterError(f"amplitude must lie in [0, 1], got {self.amplitude}")

    @property
    def lead_samples(self) -> int:
        return round(self.lead_silence * self.sample_rate)

    @property
    def sweep_samples(self) -> int:
        return round(self.sweep_duration * self.sample_rate)

    @property
    def total_samples(self) -> int:
        return round((self.lead_silence + self.sweep_duration + self.tail_silence) * self.sample_rate)

    def as_tuple(self) -> tuple[float, ...]:
        """Fields in declared order, as transmitted in the Start message."""
        return (
            float(self.f_start),
            float(self.f_end),
            float(self.sweep_duration),
            float(self.lead_silence),
            float(self.tail_silence),
            float(self.amplitude),
            float(self.sample_rate),
        )

    @classmethod
    def from_tuple(cls, values: tuple[float, ...]) -> SweepSpec:
        f_start, f_end, sweep_duration, lead, tail, amplitude, sample_rate = values
        if not float(sample_rate).is_integer():
            raise ParameterError(f"sample_rate must be integral, got {sample_rate}")
        return cls(f_start, f_end, sweep_duration, lead, tail, amplitude, int(sample_rate))


def generate_sweep(spec: SweepSpec) -> AudioSignal:
    """Lead silence, A·sin(2π(f0·t + (f1 − f0)·t²/2T)) for t in [0, T), tail silence."""
    sr = spec.sample_rate
    n_lead = spec.lead_samples
    n_sweep = spec.sweep_samples
    n_tail = max(spec.total_samples - n_lead - n_sweep, 0)

    t = np.arange(n_sweep) / sr
    T = spec.sweep_duration
    phase = 2 * np.pi * (spec.f_start * t + (spec.f_end - spec.f_start) * t**2 / (2 * T))
    sweep = spec.amplitude * np.sin(phase)

    samples = np.concatenate([np.zeros(n_lead), sweep, np.zeros(n_tail)])
    return AudioSignal(samples, sr)


def sweep_segment(excitation: AudioSignal, spec: SweepSpec) -> AudioSignal:
    """The sweep part of a padded excitation (lead and tail silence removed)."""
    start = spec.lead_samples
    stop = start + spec.sweep_samples
    if len(excitation) < stop:
        raise TruncationError(f"excitation has {len(excitation)} samples, the sweep ends at {stop}")
    return AudioSignal(excitation.samples[start:stop], excitation.sample_rate)


def _check_pair(a: AudioSignal, b: AudioSignal) -> None:
    if a.sample_rate != b.sample_rate:
        raise ParameterError(f"sample rate mismatch: {a.sample_rate} Hz vs {b.sample_rate} Hz")


def align(recorded: AudioSignal, reference: AudioSignal) -> tuple[int, AudioSignal]:
    """Locate ``reference`` inside ``recorded`` and shift it to index 0.

    Only non-negative lags are searched; the earliest lag wins a tie.
    """
    _check_pair(recorded, reference)
    if len(recorded) == 0 or len(reference) == 0:
        raise ParameterError("align needs non-empty signals")

    corr = sps.correlate(recorded.samples, reference.samples, mode="full", method="fft")
    zero_lag = len(reference) - 1
    lags = corr[zero_lag:zero_lag + len(recorded)]
    offset = int(np.argmax(lags))

    aligned = np.zeros(len(recorded))
    aligned[:len(recorded) - offset] = recorded.samples[offset:]
    return offset, AudioSignal(aligned, recorded.sample_rate)


def trim(aligned: AudioSignal, spec: SweepSpec) -> AudioSignal:
    """Keep the sweep plus the following half second of reverberation."""
    required = round((spec.sweep_duration + TRIM_TAIL_SECONDS) * spec.sample_rate)
    if len(aligned) < required:
        raise TruncationError(f"need {required} samples after alignment, got {len(aligned)}")
    return AudioSignal(aligned.samples[:required], aligned.sample_rate)


def normalize(signal: AudioSignal) -> AudioSignal:
    """Scale so that the peak absolute sample is exactly 1."""
    if len(signal) == 0:
        raise DegenerateSignalError("cannot normalize an empty signal")
    peak = float(np.max(np.abs(signal.samples)))
    if peak == 0.0:
        raise DegenerateSignalError("cannot normalize an all-zero signal")
    return AudioSignal(signal.samples / peak, signal.sample_rate)


def write_wav(signal: AudioSignal, path: str | os.PathLike) -> None:
    """Write 16-bit little-endian mono PCM. Samples beyond full scale are clipped."""
    pcm = np.round(np.clip(signal.samples, -1.0, 1.0) * PCM16_FULL_SCALE).astype(np.int16)
    sf.write(os.fspath(path), pcm, signal.sample_rate, subtype="PCM_16", format="WAV", endian="LITTLE")
    logger.debug(f"Wrote {len(pcm)} samples to {path}")


def read_wav(path: str | os.PathLike) -> AudioSignal:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    try:
        info = sf.info(path)
        if info.format != "WAV" or info.subtype != "PCM_16":
            raise WavFormatError(f"{path}: expected 16-bit PCM WAV, got {info.format}/{info.subtype}")
        if info.channels != 1:
            raise WavFormatError(f"{path}: expected mono, got {info.channels} channels")
        pcm, sample_rate = sf.read(path, dtype="int16", always_2d=False)
    except (RuntimeError, sf.SoundFileError) as e:
        raise WavFormatError(f"{path}: {e}") from e
    return AudioSignal(pcm.astype(np.float64) / PCM16_FULL_SCALE, int(sample_rate))
