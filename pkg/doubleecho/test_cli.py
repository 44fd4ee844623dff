import csv
import io
import json

import numpy as np
import pytest

from doubleecho.classifier import DecisionTree, ForestHyperparameters, ForestModel
from doubleecho.cli import EXIT_OK, EXIT_PIPELINE, EXIT_PROTOCOL, EXIT_USAGE, main
from doubleecho.signal import AudioSignal, SweepSpec, generate_sweep, read_wav, write_wav
from doubleecho.simulator import DatasetConfig, DeviceProfile, Placement, RoomModel, simulate_recording


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in (
        "DOUBLEECHO_LOG_LEVEL",
        "DOUBLEECHO_SEED",
        "DOUBLEECHO_SWEEP_AMPLITUDE",
        "DOUBLEECHO_SESSION_KEY",
        "DOUBLEECHO_N_JOBS",
        "DOUBLEECHO_TRACE_CONSOLE",
        "OTEL_EXPORTER_OTLP_ENDPOINT",
    ):
        monkeypatch.delenv(name, raising=False)


def run(capsys, *argv: str) -> tuple[int, str]:
    code = main(list(argv))
    return code, capsys.readouterr().out


def test_gen_sweep_defaults(tmp_path, capsys):
    path = tmp_path / "sweep.wav"
    code, out = run(capsys, "gen-sweep", str(path))
    assert code == EXIT_OK
    doc = json.loads(out)
    assert doc["samples"] == 220500
    assert doc["duration"] == pytest.approx(5.0)
    assert len(read_wav(path)) == 220500


def test_gen_sweep_one_second(tmp_path, capsys):
    code, out = run(capsys, "gen-sweep", str(tmp_path / "short.wav"), "--duration", "1")
    assert code == EXIT_OK
    assert json.loads(out)["samples"] == 4 * 44100


def test_gen_sweep_rejects_f_end_above_nyquist(tmp_path, capsys, caplog):
    code, _ = run(capsys, "gen-sweep", str(tmp_path / "bad.wav"), "--f-end", "30000")
    assert code == EXIT_USAGE
    assert "f_end" in caplog.text
    assert not (tmp_path / "bad.wav").exists()


def test_usage_errors_exit_with_1():
    with pytest.raises(SystemExit) as exit_info:
        main([])
    assert exit_info.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exit_info:
        main(["demo", "teleport"])
    assert exit_info.value.code == EXIT_USAGE


def test_invalid_environment_exits_with_1(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("DOUBLEECHO_SEED", "not-a-number")
    code, _ = run(capsys, "gen-sweep", str(tmp_path / "sweep.wav"))
    assert code == EXIT_USAGE


@pytest.fixture
def sweep_files(tmp_path) -> tuple[str, str]:
    spec = SweepSpec()
    excitation = generate_sweep(spec)
    room = RoomModel((6.0, 4.5, 3.0), 0.3, max_order=8)
    recording = simulate_recording(room, Placement((2.0, 2.0, 1.2), (2.3, 2.0, 1.2)), excitation, DeviceProfile(snr_db=40.0), 1)
    write_wav(excitation, tmp_path / "excitation.wav")
    write_wav(recording, tmp_path / "recording.wav")
    return str(tmp_path / "recording.wav"), str(tmp_path / "excitation.wav")


def test_analyze_is_byte_identical_across_runs(tmp_path, capsys, sweep_files):
    recording, excitation = sweep_files
    first, second = tmp_path / "a.json", tmp_path / "b.json"
    assert run(capsys, "analyze", recording, excitation, "--output", str(first))[0] == EXIT_OK
    assert run(capsys, "analyze", recording, excitation, "--output", str(second))[0] == EXIT_OK
    assert first.read_bytes() == second.read_bytes()
    doc = json.loads(first.read_text())
    assert len(doc["values"]) == 224
    assert np.all(np.isfinite(doc["values"]))
    assert doc["method"] == "matched_filter"
    assert {"direct_delay_seconds", "noise_floor_db", "excitation_margin_db"} <= set(doc)


def test_analyze_excitation_against_itself(capsys, sweep_files):
    _, excitation = sweep_files
    code, out = run(capsys, "analyze", excitation, excitation, "--method", "regularized_inverse")
    assert code == EXIT_OK
    doc = json.loads(out)
    assert doc["direct_delay_samples"] == 0
    assert doc["values"][2] >= 50.0


def test_analyze_requires_matching_sweep_options(capsys, sweep_files):
    recording, excitation = sweep_files
    code, _ = run(capsys, "analyze", recording, excitation, "--duration", "1")
    assert code == EXIT_USAGE


def test_analyze_of_silence_is_a_pipeline_error(tmp_path, capsys, sweep_files):
    _, excitation = sweep_files
    silent = tmp_path / "silent.wav"
    write_wav(AudioSignal(np.zeros(220500), 44100), silent)
    code, _ = run(capsys, "analyze", str(silent), excitation)
    assert code == EXIT_PIPELINE


def test_analyze_missing_file_exits_with_1(tmp_path, capsys, sweep_files):
    _, excitation = sweep_files
    code, _ = run(capsys, "analyze", str(tmp_path / "nope.wav"), excitation)
    assert code == EXIT_USAGE


@pytest.fixture(scope="module")
def dataset_config(tmp_path_factory) -> str:
    rooms = (
        RoomModel((4.0, 3.5, 2.6), 0.35, max_order=6, name="small"),
        RoomModel((10.0, 7.0, 3.4), 0.08, max_order=6, name="large"),
    )
    config = DatasetConfig(rooms=rooms, devices_per_room=2, sessions_per_room=5, seed=11, device_pool=4)
    path = tmp_path_factory.mktemp("config") / "dataset.json"
    path.write_text(json.dumps(config.to_dict()))
    return str(path)


def _csv_rows(text: str) -> list[dict[str, str]]:
    return list(csv.DictReader(io.StringIO(text)))


def test_simulate_train_evaluate_is_reproducible(tmp_path, capsys, dataset_config):
    outputs = []
    for name in ("first", "second"):
        root = tmp_path / name
        code, out = run(capsys, "simulate", str(root / "dataset"), "--config", dataset_config, "--seed", "11")
        assert code == EXIT_OK
        assert json.loads(out)["counts"] == {"copresent": 10, "non_copresent": 20}

        model = root / "model.json"
        code, _ = run(capsys, "train", str(root / "dataset"), str(model), "--top-k", "10", "--trees", "5", "--seed", "3")
        assert code == EXIT_OK

        report = root / "report.csv"
        code, _ = run(
            capsys, "evaluate", str(root / "dataset"), "--top-k", "10", "--trees", "5",
            "--folds", "2", "--seed", "3", "--output", str(report),
        )
        assert code == EXIT_OK
        outputs.append(((root / "dataset" / "manifest.json").read_bytes(), model.read_bytes(), report.read_bytes()))

    assert outputs[0] == outputs[1]
    rows = _csv_rows(outputs[0][2].decode())
    assert [row["fold"] for row in rows] == ["0", "1", "all"]
    total = rows[-1]
    assert int(total["tp"]) + int(total["fn"]) == 10
    assert int(total["fp"]) + int(total["tn"]) == 20


def test_evaluate_model_with_baseline(tmp_path, capsys, dataset_config):
    dataset = tmp_path / "dataset"
    assert run(capsys, "simulate", str(dataset), "--config", dataset_config)[0] == EXIT_OK
    model = tmp_path / "model.json"
    assert run(capsys, "train", str(dataset), str(model), "--top-k", "10", "--trees", "5")[0] == EXIT_OK

    code, out = run(capsys, "evaluate", str(dataset), "--model", str(model), "--baseline")
    assert code == EXIT_OK
    rows = _csv_rows(out)
    assert [(row["method"], row["fold"]) for row in rows] == [("doubleecho", "all"), ("xcorr", "all")]
    assert rows[1]["top_k"] == ""
    for row in rows:
        assert int(row["tp"]) + int(row["fn"]) == 10
        assert int(row["fp"]) + int(row["tn"]) == 20


def test_evaluate_reports_each_location_and_the_union(tmp_path, capsys):
    rooms = (
        RoomModel((4.0, 3.5, 2.6), 0.35, max_order=6, name="small"),
        RoomModel((10.0, 7.0, 3.4), 0.08, max_order=6, name="large"),
    )
    config = DatasetConfig(
        rooms=rooms, devices_per_room=2, sessions_per_room=3, locations_per_room=2, seed=4, device_pool=4
    )
    config_path = tmp_path / "dataset.json"
    config_path.write_text(json.dumps(config.to_dict()))
    dataset = tmp_path / "office"
    assert run(capsys, "simulate", str(dataset), "--config", str(config_path))[0] == EXIT_OK

    code, out = run(
        capsys, "evaluate", str(dataset), "--top-k", "10", "--trees", "5", "--folds", "2", "--baseline",
    )
    assert code == EXIT_OK
    rows = _csv_rows(out)
    cv_rows = [row for row in rows if row["method"] == "doubleecho"]
    assert [row["dataset"] for row in cv_rows] == ["office.1"] * 3 + ["office.2"] * 3 + ["office"] * 3
    assert [row["fold"] for row in cv_rows] == ["0", "1", "all"] * 3
    baseline_rows = [row for row in rows if row["method"] == "xcorr"]
    assert [row["dataset"] for row in baseline_rows] == ["office.1", "office.2", "office"]

    totals = {row["dataset"]: row for row in cv_rows if row["fold"] == "all"}
    for name, (benign, attack) in {"office.1": (6, 12), "office.2": (6, 12), "office": (12, 24)}.items():
        assert int(totals[name]["tp"]) + int(totals[name]["fn"]) == benign
        assert int(totals[name]["fp"]) + int(totals[name]["tn"]) == attack


def test_train_on_missing_dataset_exits_with_1(tmp_path, capsys):
    code, _ = run(capsys, "train", str(tmp_path / "missing"), str(tmp_path / "model.json"))
    assert code == EXIT_USAGE


@pytest.fixture(scope="module")
def always_model(tmp_path_factory) -> str:
    leaf = DecisionTree.from_dict({"leaf": [0.0, 1.0]})
    model = ForestModel((leaf,), (0,), seed=0, hyperparameters=ForestHyperparameters(top_k=1, mtry=1))
    path = tmp_path_factory.mktemp("model") / "always.json"
    model.save(path)
    return str(path)


def test_demo_benign_prints_transcript_and_verdict(capsys, always_model):
    code, out = run(capsys, "demo", "benign", "--model", always_model, "--seed", "1")
    assert code == EXIT_OK
    doc = json.loads(out)
    assert doc["verdict"] == "copresent"
    assert doc["attempts"] == 1
    assert [entry["kind"] for entry in doc["transcript"]] == ["Start", "Report", "Decision"]
    assert all(set(entry["hex"]) <= set("0123456789abcdef") for entry in doc["transcript"])


def test_demo_relay_aborts_with_exit_3(capsys, always_model):
    code, out = run(capsys, "demo", "relay", "--model", always_model, "--seed", "1", "--retry")
    assert code == EXIT_PROTOCOL
    doc = json.loads(out)
    assert doc["verdict"] is None
    assert doc["aborted"] is True
    assert doc["abort_kind"] == "measurement"
    assert doc["attempts"] == 2
