"""Band filtering and the 224-value acoustic feature vector of an RIR.

Per band the vector holds, in order: RT60, EDT, DRR, C10, C35, C50, C80.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Literal

import numpy as np
from scipy import fft as spfft
from scipy.ndimage import uniform_filter1d

from doubleecho.errors import DecayRangeError, DegenerateSignalError, ParameterError
from doubleecho.rir import ImpulseResponse, power_db

logger = logging.getLogger(__name__)

BandKind = Literal["wide", "octave", "third_octave"]
DecayRange = Literal["RT30", "RT20"]

FEATURE_NAMES = ("RT60", "EDT", "DRR", "C10", "C35", "C50", "C80")
CLARITY_SPLITS_MS = (10, 35, 50, 80)

OCTAVE_CENTERS = (31.5, 63.0, 125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0, 16000.0)
THIRD_OCTAVE_CENTERS = (
    100.0, 125.0, 160.0, 200.0, 250.0, 315.0, 400.0, 500.0, 630.0, 800.0, 1000.0,
    1250.0, 1600.0, 2000.0, 2500.0, 3150.0, 4000.0, 5000.0, 6300.0, 8000.0, 10000.0,
)
MIN_PLAN_SAMPLE_RATE = 44100

RATIO_CLAMP_DB = 60.0
DIRECT_HALF_WINDOW_SECONDS = 0.0025
SMOOTHING_SECONDS = 0.005
TRUNCATION_MARGIN_DB = 6.0
RT_SENTINEL = 0.0


@dataclass(frozen=True)
class BandSpec:
    kind: BandKind
    f_center: float
    f_low: float
    f_high: float

    @classmethod
    def wide(cls, sample_rate: int) -> BandSpec:
        nyquist = sample_rate / 2
        return cls("wide", nyquist / 2, 0.0, nyquist)

    @classmethod
    def octave(cls, f_center: float) -> BandSpec:
        f_low = f_center / 2**0.5
        return cls("octave", f_center, f_low, 2 * f_low)

    @classmethod
    def third_octave(cls, f_center: float) -> BandSpec:
        f_low = f_center / 2 ** (1 / 6)
        return cls("third_octave", f_center, f_low, f_low * 2 ** (1 / 3))

    @property
    def label(self) -> str:
        if self.kind == "wide":
            return "wide"
        return f"{self.kind} {self.f_center:g} Hz"


@dataclass(frozen=True)
class BandPlan:
    bands: tuple[BandSpec, ...]

    def __post_init__(self):
        kinds = [band.kind for band in self.bands]
        if (kinds.count("wide"), kinds.count("octave"), kinds.count("third_octave")) != (1, 10, 21):
            raise ParameterError("a band plan needs 1 wide, 10 octave and 21 third-octave bands")
        for kind in ("octave", "third_octave"):
            centers = [band.f_center for band in self.bands if band.kind == kind]
            if any(b <= a for a, b in zip(centers, centers[1:])):
                raise ParameterError(f"{kind} centers must be strictly increasing")

    def __len__(self) -> int:
        return len(self.bands)

    def feature_names(self) -> list[str]:
        return [f"{band.label} {name}" for band in self.bands for name in FEATURE_NAMES]


@dataclass(frozen=True, eq=False)
class DecayCurve:
    """Schroeder decay in dB, starting at the direct sound (0 dB)."""

    values_db: np.ndarray
    sample_rate: int
    truncation_index: int

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.values_db)) / self.sample_rate


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    plan: BandPlan

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        expected = len(FEATURE_NAMES) * len(self.plan)
        if values.shape != (expected,):
            raise ParameterError(f"feature vector must have {expected} entries, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ParameterError("feature vector entries must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    def to_list(self) -> list[float]:
        return [float(v) for v in self.values]

    def to_records(self) -> list[dict[str, Any]]:
        records = []
        for b, band in enumerate(self.plan.bands):
            for f, name in enumerate(FEATURE_NAMES):
                records.append({
                    "band_kind": band.kind,
                    "f_center": band.f_center,
                    "feature_name": name,
                    "value": float(self.values[b * len(FEATURE_NAMES) + f]),
                })
        return records


def standard_band_plan(sample_rate: int = 44100) -> BandPlan:
    """1 wide band, 10 octave bands and 21 third-octave bands on preferred centers."""
    if sample_rate < MIN_PLAN_SAMPLE_RATE:
        raise ParameterError(f"the standard band plan needs sample_rate >= {MIN_PLAN_SAMPLE_RATE}, got {sample_rate}")
    bands = [BandSpec.wide(sample_rate)]
    bands += [BandSpec.octave(fc) for fc in OCTAVE_CENTERS]
    bands += [BandSpec.third_octave(fc) for fc in THIRD_OCTAVE_CENTERS]
    return BandPlan(tuple(bands))


def band_mask(freqs: np.ndarray, f_low: float, f_high: float) -> np.ndarray:
    """1 on [f_low, f_high], raised-cosine skirts of min(0.1·f_low, 10 Hz) outside it."""
    width = min(0.1 * f_low, 10.0)
    mask = ((freqs >= f_low) & (freqs <= f_high)).astype(np.float64)
    if width > 0:
        rising = (freqs > f_low - width) & (freqs < f_low)
        mask[rising] = 0.5 * (1 - np.cos(np.pi * (freqs[rising] - (f_low - width)) / width))
        falling = (freqs > f_high) & (freqs < f_high + width)
        mask[falling] = 0.5 * (1 + np.cos(np.pi * (freqs[falling] - f_high) / width))
    return mask


def bandpass(ir: ImpulseResponse, band: BandSpec) -> ImpulseResponse:
    """Zero-phase FFT-mask filter. The part of a band above Nyquist is dropped."""
    if band.kind == "wide":
        return ir
    nyquist = ir.sample_rate / 2
    if band.f_low >= nyquist:
        raise ParameterError(f"{band.label} lies above the Nyquist frequency {nyquist} Hz")
    n = len(ir.samples)
    spectrum = spfft.rfft(ir.samples)
    freqs = spfft.rfftfreq(n, d=1 / ir.sample_rate)
    filtered = spfft.irfft(spectrum * band_mask(freqs, band.f_low, band.f_high), n)
    return ir.with_samples(filtered)


def schroeder_curve(ir: ImpulseResponse) -> DecayCurve:
    """Backward-integrated energy from the direct sound to the noise-floor crossing."""
    energy = ir.samples**2
    peak = float(energy.max())
    if peak == 0.0:
        raise DegenerateSignalError("impulse response has zero energy")

    window = max(1, round(SMOOTHING_SECONDS * ir.sample_rate))
    smoothed_db = power_db(uniform_filter1d(energy, size=window, mode="constant") / peak)
    above = np.nonzero(smoothed_db > ir.noise_floor_db + TRUNCATION_MARGIN_DB)[0]
    truncation = int(above[-1]) if above.size else len(energy) - 1
    truncation = max(truncation, ir.direct_index)

    tail = energy[ir.direct_index:truncation + 1]
    integrated = np.cumsum(tail[::-1])[::-1]
    if integrated[0] == 0.0:
        raise DegenerateSignalError("no energy after the direct sound")
    values_db = np.minimum.accumulate(power_db(integrated / integrated[0]))
    values_db[0] = 0.0
    return DecayCurve(values_db, ir.sample_rate, truncation)


def _decay_fit(curve: DecayCurve, upper_db: float, lower_db: float) -> float:
    """Least-squares slope (dB/s) of the curve from ``upper_db`` down to ``lower_db``."""
    values = curve.values_db
    if values.min() > lower_db:
        raise DecayRangeError(f"decay curve never reaches {lower_db} dB (minimum {values.min():.1f} dB)")
    start = int(np.argmax(values <= upper_db))
    stop = int(np.argmax(values <= lower_db))
    # The curve never rises, so points above lower_db are exactly start..stop-1.
    if stop - start < 2:
        raise DecayRangeError(f"fewer than two curve points between {upper_db} and {lower_db} dB")
    times = curve.times[start:stop + 1]
    slope = np.polyfit(times, values[start:stop + 1], 1)[0]
    if slope >= 0:
        raise DecayRangeError("decay curve does not decay over the fit range")
    return float(slope)


def rt_from_decay(curve: DecayCurve, decay_range: DecayRange = "RT30") -> float:
    """RT60 extrapolated from the -5 dB to -35 dB (RT30) or -25 dB (RT20) span."""
    if decay_range == "RT30":
        span = 30.0
    elif decay_range == "RT20":
        span = 20.0
    else:
        raise ParameterError(f"unknown decay range {decay_range!r}")
    return -60.0 / _decay_fit(curve, -5.0, -5.0 - span)


def edt(curve: DecayCurve) -> float:
    """Early decay time: the first 10 dB of decay, extrapolated to 60 dB."""
    return -60.0 / _decay_fit(curve, 0.0, -10.0)


def _energy_ratio_db(first: float, second: float) -> float:
    if first == 0.0 and second == 0.0:
        raise DegenerateSignalError("both energy windows are empty")
    if second == 0.0:
        return RATIO_CLAMP_DB
    if first == 0.0:
        return -RATIO_CLAMP_DB
    return float(np.clip(10 * math.log10(first / second), -RATIO_CLAMP_DB, RATIO_CLAMP_DB))


def clarity(ir: ImpulseResponse, split_ms: int) -> float:
    """Early-to-late energy ratio in dB, split ``split_ms`` after the direct sound."""
    if split_ms not in CLARITY_SPLITS_MS:
        raise ParameterError(f"split_ms must be one of {CLARITY_SPLITS_MS}, got {split_ms}")
    energy = ir.samples**2
    split = ir.direct_index + round(split_ms * ir.sample_rate / 1000)
    return _energy_ratio_db(float(energy[ir.direct_index:split].sum()), float(energy[split:].sum()))


def drr(ir: ImpulseResponse) -> float:
    """Direct (±2.5 ms around the peak) to reverberant energy ratio in dB."""
    energy = ir.samples**2
    half = round(DIRECT_HALF_WINDOW_SECONDS * ir.sample_rate)
    lo = max(0, ir.direct_index - half)
    hi = min(len(energy), ir.direct_index + half + 1)
    direct = float(energy[lo:hi].sum())
    rest = float(energy[:lo].sum() + energy[hi:].sum())
    return _energy_ratio_db(direct, rest)


def _band_features(band_ir: ImpulseResponse) -> list[float]:
    curve = schroeder_curve(band_ir)
    try:
        rt60 = rt_from_decay(curve, "RT30")
    except DecayRangeError:
        try:
            rt60 = rt_from_decay(curve, "RT20")
        except DecayRangeError:
            rt60 = RT_SENTINEL
    try:
        early_decay = edt(curve)
    except DecayRangeError:
        early_decay = RT_SENTINEL
    return [rt60, early_decay, drr(band_ir)] + [clarity(band_ir, split) for split in CLARITY_SPLITS_MS]


def feature_vector(ir: ImpulseResponse, plan: BandPlan | None = None) -> FeatureVector:
    """The 7 features of every band in ``plan``, in plan order."""
    plan = plan or standard_band_plan(ir.sample_rate)
    values: list[float] = []
    for band in plan.bands:
        values.extend(_band_features(bandpass(ir, band)))
    return FeatureVector(np.array(values), plan)
