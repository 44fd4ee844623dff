import numpy as np
import pytest

from doubleecho.errors import DegenerateSignalError, ParameterError, TruncationError, WavFormatError
from doubleecho.signal import (
    AudioSignal,
    SweepSpec,
    align,
    generate_sweep,
    normalize,
    read_wav,
    sweep_segment,
    trim,
    write_wav,
)


def test_default_sweep_is_five_seconds():
    excitation = generate_sweep(SweepSpec())
    assert len(excitation) == 220500
    assert excitation.duration == pytest.approx(5.0)
    assert excitation.sample_rate == 44100


def test_sweep_padding_is_silent_and_peak_is_amplitude():
    spec = SweepSpec()
    samples = generate_sweep(spec).samples
    assert np.all(samples[:spec.lead_samples] == 0.0)
    assert np.all(samples[spec.lead_samples + spec.sweep_samples:] == 0.0)
    assert np.max(np.abs(samples)) == pytest.approx(0.5, abs=1e-3)


def test_one_second_sweep_is_four_seconds_total():
    excitation = generate_sweep(SweepSpec(sweep_duration=1.0))
    assert len(excitation) == 4 * 44100


def test_sweep_phase_follows_closed_form():
    spec = SweepSpec(f_start=100.0, f_end=1000.0, sweep_duration=1.0, lead_silence=0.0, tail_silence=0.0)
    samples = generate_sweep(spec).samples
    t = np.arange(44100) / 44100
    expected = 0.5 * np.sin(2 * np.pi * (100.0 * t + 900.0 * t**2 / 2))
    np.testing.assert_allclose(samples, expected, atol=1e-12)


@pytest.mark.parametrize("kwargs", [
    {"f_end": 30000.0},
    {"f_start": 500.0, "f_end": 400.0},
    {"sweep_duration": 0.0},
    {"amplitude": 1.5},
    {"lead_silence": -1.0},
])
def test_invalid_sweep_spec_is_rejected(kwargs):
    with pytest.raises(ParameterError):
        SweepSpec(**kwargs)


def test_f_end_above_nyquist_names_the_parameter():
    with pytest.raises(ParameterError, match="f_end"):
        SweepSpec(f_end=30000.0)


def test_spec_tuple_round_trip_keeps_field_order():
    spec = SweepSpec(f_start=20.0, f_end=20000.0, sweep_duration=3.0, amplitude=0.25)
    assert spec.as_tuple() == (20.0, 20000.0, 3.0, 1.0, 2.0, 0.25, 44100.0)
    assert SweepSpec.from_tuple(spec.as_tuple()) == spec


def test_sweep_segment_strips_padding():
    spec = SweepSpec()
    segment = sweep_segment(generate_sweep(spec), spec)
    assert len(segment) == spec.sweep_samples


def test_align_recovers_known_delay():
    spec = SweepSpec()
    excitation = generate_sweep(spec)
    sweep = sweep_segment(excitation, spec)
    delayed = np.concatenate([np.zeros(1234), excitation.samples])[:len(excitation)]
    offset, aligned = align(AudioSignal(delayed, 44100), sweep)
    assert offset == spec.lead_samples + 1234
    np.testing.assert_array_equal(aligned.samples[:spec.sweep_samples], sweep.samples)
    assert len(aligned) == len(excitation)


@pytest.mark.parametrize("k", [0, 37, 441, 4410])
def test_align_finds_attenuated_copy_in_noise(k):
    spec = SweepSpec()
    sweep = sweep_segment(generate_sweep(spec), spec)
    rng = np.random.default_rng(k)
    recorded = np.zeros(len(sweep) + 5000)
    recorded[k:k + len(sweep)] = 0.5 * sweep.samples
    sigma = np.sqrt(np.mean((0.5 * sweep.samples) ** 2)) / 10 ** (30 / 20)
    recorded += rng.normal(0.0, sigma, len(recorded))
    offset, _ = align(AudioSignal(recorded, 44100), sweep)
    assert offset == k


def test_align_is_shift_equivariant():
    spec = SweepSpec(sweep_duration=1.0)
    excitation = generate_sweep(spec)
    sweep = sweep_segment(excitation, spec)
    rng = np.random.default_rng(3)
    base = excitation.samples + rng.normal(0.0, 0.01, len(excitation))
    reference, _ = align(AudioSignal(base, 44100), sweep)
    for k in (1, 100, 3000):
        shifted = np.concatenate([np.zeros(k), base])
        offset, _ = align(AudioSignal(shifted, 44100), sweep)
        assert offset == reference + k


def test_align_rejects_rate_mismatch():
    with pytest.raises(ParameterError):
        align(AudioSignal(np.ones(10), 44100), AudioSignal(np.ones(5), 48000))


def test_trim_keeps_sweep_plus_half_second():
    spec = SweepSpec()
    trimmed = trim(AudioSignal(np.ones(spec.total_samples), 44100), spec)
    assert len(trimmed) == round(2.5 * 44100)


def test_trim_short_signal_raises():
    with pytest.raises(TruncationError):
        trim(AudioSignal(np.ones(1000), 44100), SweepSpec())


def test_normalize_sets_unit_peak():
    signal = normalize(AudioSignal(np.array([0.1, -0.4, 0.2]), 8000))
    assert np.max(np.abs(signal.samples)) == 1.0
    assert signal.samples[1] == -1.0


def test_normalize_all_zero_raises():
    with pytest.raises(DegenerateSignalError):
        normalize(AudioSignal(np.zeros(100), 8000))


def test_audio_signal_is_read_only():
    signal = AudioSignal(np.zeros(4), 8000)
    with pytest.raises(ValueError):
        signal.samples[0] = 1.0


def test_wav_round_trip_is_within_one_lsb(tmp_path):
    rng = np.random.default_rng(3)
    signal = AudioSignal(rng.uniform(-0.9, 0.9, 4410), 44100)
    path = tmp_path / "clip.wav"
    write_wav(signal, path)
    loaded = read_wav(path)
    assert loaded.sample_rate == 44100
    assert np.max(np.abs(loaded.samples - signal.samples)) <= 1 / 32767


def test_wav_writer_clips_out_of_range_samples(tmp_path):
    path = tmp_path / "loud.wav"
    write_wav(AudioSignal(np.array([2.0, -3.0, 0.0]), 8000), path)
    np.testing.assert_allclose(read_wav(path).samples, [1.0, -1.0, 0.0])


def test_read_wav_rejects_garbage(tmp_path):
    path = tmp_path / "bad.wav"
    path.write_bytes(b"RIFF....not a wav file")
    with pytest.raises(WavFormatError):
        read_wav(path)


def test_read_wav_rejects_float_encoding(tmp_path):
    import soundfile as sf

    path = tmp_path / "float.wav"
    sf.write(path, np.zeros(100, dtype=np.float32), 8000, subtype="FLOAT")
    with pytest.raises(WavFormatError):
        read_wav(path)
