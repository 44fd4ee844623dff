"""Recording → impulse response → feature vector, as one traced call."""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any

import numpy as np

from doubleecho.classifier import PairSample, build_pair_samples
from doubleecho.errors import DegenerateSignalError, ParameterError, TruncationError
from doubleecho.features import BandPlan, FeatureVector, feature_vector, standard_band_plan
from doubleecho.rir import NOISE_WINDOW_SECONDS, DeconvolutionMethod, ImpulseResponse, deconvolve, extract_linear_rir, power_db
from doubleecho.signal import AudioSignal, SweepSpec, align, normalize, sweep_segment, trim
from doubleecho.simulator import Dataset
from doubleecho.telemetry import get_tracer

logger = logging.getLogger(__name__)

# Direct sound must clear the noise floor by this much for a usable decay range.
ADEQUATE_MARGIN_DB = 40.0
MAX_SWEEP_SECONDS = 8.0


def tail_level_db(ir: ImpulseResponse) -> float:
    """Mean energy of the last 10 ms of the window, in dB re the direct sound."""
    n_window = max(1, round(NOISE_WINDOW_SECONDS * ir.sample_rate))
    peak_energy = float(ir.samples[ir.direct_index] ** 2)
    if peak_energy == 0.0:
        return 0.0
    return min(float(power_db(np.mean(ir.samples[-n_window:] ** 2) / peak_energy)), 0.0)


@dataclass(frozen=True, eq=False)
class Analysis:
    offset: int
    direct_delay: int
    impulse_response: ImpulseResponse
    features: FeatureVector

    @property
    def sample_rate(self) -> int:
        return self.impulse_response.sample_rate

    @property
    def direct_delay_seconds(self) -> float:
        return self.direct_delay / self.sample_rate

    @property
    def excitation_margin_db(self) -> float:
        """Distance from the direct sound down to the louder of the pre-peak and end-of-window levels."""
        return -max(self.impulse_response.noise_floor_db, tail_level_db(self.impulse_response))

    @property
    def adequate(self) -> bool:
        return self.excitation_margin_db >= ADEQUATE_MARGIN_DB

    def to_dict(self, include_ir: bool = False) -> dict[str, Any]:
        return {
            "offset": self.offset,
            "direct_delay_samples": self.direct_delay,
            "direct_delay_seconds": self.direct_delay_seconds,
            "noise_floor_db": self.impulse_response.noise_floor_db,
            "excitation_margin_db": self.excitation_margin_db,
            "adequate": self.adequate,
            "impulse_response": self.impulse_response.to_dict(include_samples=include_ir),
            "features": self.features.to_records(),
            "values": self.features.to_list(),
        }


def analyze_recording(
    recording: AudioSignal,
    excitation: AudioSignal,
    spec: SweepSpec,
    method: DeconvolutionMethod = "matched_filter",
    plan: BandPlan | None = None,
) -> Analysis:
    """Run align → trim → normalize → deconvolve → extract → feature_vector.

    The recording is aligned against the sweep part of ``excitation`` so the
    aligned signal starts at sweep onset. Any stage error propagates.
    """
    with get_tracer().start_as_current_span("pipeline.analyze") as span:
        span.set_attribute("doubleecho.method", method)
        span.set_attribute("doubleecho.recording_samples", len(recording))
        sweep = sweep_segment(excitation, spec)

        offset, aligned = align(recording, sweep)
        conditioned = normalize(trim(aligned, spec))
        raw = deconvolve(conditioned, sweep, method=method)
        ir = extract_linear_rir(raw)
        features = feature_vector(ir, plan or standard_band_plan(ir.sample_rate))

        analysis = Analysis(offset, offset - spec.lead_samples, ir, features)
        span.set_attribute("doubleecho.offset", offset)
        span.set_attribute("doubleecho.excitation_margin_db", analysis.excitation_margin_db)
        if not analysis.adequate:
            logger.warning(
                f"Excitation margin {analysis.excitation_margin_db:.1f} dB is below "
                f"{ADEQUATE_MARGIN_DB:.0f} dB; decay features may be unreliable"
            )
        logger.debug(f"Analyzed recording: offset={offset}, noise floor {ir.noise_floor_db:.1f} dB")
        return analysis


def analyze_dataset(
    dataset: Dataset,
    method: DeconvolutionMethod = "matched_filter",
    n_jobs: int = 1,
) -> tuple[dict[str, FeatureVector], Dataset]:
    """Feature vectors for every recording of ``dataset``.

    Recordings the pipeline cannot process are discarded together with every
    pair that uses them; the second return value is the dataset without them.
    """
    plan = standard_band_plan(dataset.excitation.sample_rate)

    def _analyze(recording_id: str) -> tuple[str, FeatureVector | None]:
        recording = dataset.recordings[recording_id]
        try:
            analysis = analyze_recording(recording.signal, dataset.excitation, dataset.sweep, method, plan)
        except (DegenerateSignalError, TruncationError) as e:
            logger.warning(f"Discarding recording {recording_id}: {e}")
            return recording_id, None
        return recording_id, analysis.features

    with ThreadPoolExecutor(max_workers=n_jobs) as executor:
        results = list(executor.map(_analyze, sorted(dataset.recordings)))

    features = {rid: fv for rid, fv in results if fv is not None}
    failed = {rid for rid, fv in results if fv is None}
    kept = dataset.without(failed) if failed else dataset
    if failed:
        logger.warning(
            f"Discarded {len(failed)} recordings and {len(dataset.pairs) - len(kept.pairs)} pairs that use them"
        )
    logger.info(f"Analyzed {len(features)} recordings")
    return features, kept


def extended_spec(spec: SweepSpec, factor: float = 2.0) -> SweepSpec:
    """A longer sweep for a retried measurement, capped at 8 s."""
    if factor <= 1.0:
        raise ParameterError(f"factor must exceed 1, got {factor}")
    return dataclasses.replace(spec, sweep_duration=min(spec.sweep_duration * factor, MAX_SWEEP_SECONDS))


def dataset_samples(
    dataset: Dataset,
    method: DeconvolutionMethod = "matched_filter",
    n_jobs: int = 1,
) -> tuple[list[PairSample], Dataset]:
    """Squared-difference pair samples for every pair whose recordings could be analyzed."""
    features, kept = analyze_dataset(dataset, method, n_jobs)
    return build_pair_samples(kept.pairs, features), kept
