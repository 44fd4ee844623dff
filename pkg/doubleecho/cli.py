"""Command-line entry point: ``doubleecho <subcommand> ...``.

Structured results go to stdout as JSON (CSV for confusion tables); logs go to
stderr. Exit codes: 0 ok, 1 usage or configuration, 2 pipeline or degenerate
signal, 3 protocol abort in a demo session.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from doubleecho import __version__
from doubleecho.classifier import (
    DECISION_THRESHOLD,
    BaselineScorer,
    ConfusionReport,
    ForestHyperparameters,
    ForestModel,
    PairSample,
    cross_validate,
    fit_model,
    predict_scores,
    reports_csv,
    write_reports_csv,
)
from doubleecho.config import LOG_FORMAT, Settings, derive_seed
from doubleecho.errors import (
    ClassError,
    ConfigError,
    DecayRangeError,
    DegenerateSignalError,
    DoubleEchoError,
    MeasurementError,
    ParameterError,
    ProtocolError,
    TruncationError,
    WavFormatError,
)
from doubleecho.pipeline import analyze_recording, dataset_samples, extended_spec
from doubleecho.protocol import InProcessTransport, relay
from doubleecho.session import SCENARIOS, demo_key, demo_model, run_session, scenario_environments
from doubleecho.signal import SweepSpec, generate_sweep, read_wav, write_wav
from doubleecho.simulator import COPRESENT, Dataset, DatasetConfig, default_room_corpus, generate_dataset
from doubleecho.telemetry import configure_tracing

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PIPELINE = 2
EXIT_PROTOCOL = 3

DEFAULT_TOP_K = (50,)
# Entropy for demo nonces is derived from the master seed under this key.
_NONCE_KEY = 99


class CommandError(DoubleEchoError):
    """A subcommand cannot run with the arguments it was given."""


def _emit(doc: Any, output: str | None = None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if output:
        Path(output).write_text(text)
        logger.info(f"Wrote {output}")
    else:
        sys.stdout.write(text)


def _top_k_list(raw: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {raw!r}") from e
    if not values:
        raise argparse.ArgumentTypeError("at least one top-k value is required")
    return values


def _sweep_spec(args: argparse.Namespace, settings: Settings) -> SweepSpec:
    amplitude = args.amplitude if args.amplitude is not None else settings.sweep_amplitude
    return SweepSpec(
        f_start=args.f_start,
        f_end=args.f_end,
        sweep_duration=args.duration,
        lead_silence=args.lead_silence,
        tail_silence=args.tail_silence,
        amplitude=amplitude,
        sample_rate=args.sample_rate,
    )


def _hyperparameters(args: argparse.Namespace, top_k: int) -> ForestHyperparameters:
    return ForestHyperparameters.for_top_k(top_k, tree_count=args.trees, max_depth=args.max_depth)


def cmd_gen_sweep(args: argparse.Namespace, settings: Settings) -> int:
    spec = _sweep_spec(args, settings)
    excitation = generate_sweep(spec)
    write_wav(excitation, args.output)
    _emit({
        "path": str(args.output),
        "duration": excitation.duration,
        "samples": len(excitation),
        "sample_rate": excitation.sample_rate,
        "sweep": asdict(spec),
    })
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace, settings: Settings) -> int:
    spec = _sweep_spec(args, settings)
    recording = read_wav(args.recording)
    excitation = read_wav(args.excitation)
    if excitation.sample_rate != spec.sample_rate or len(excitation) != spec.total_samples:
        raise CommandError(
            f"{args.excitation} ({len(excitation)} samples at {excitation.sample_rate} Hz) does not match the sweep "
            f"options ({spec.total_samples} samples at {spec.sample_rate} Hz); pass the options used for gen-sweep"
        )
    analysis = analyze_recording(recording, excitation, spec, method=args.method)
    _emit({"recording": str(args.recording), "method": args.method, **analysis.to_dict(args.include_ir)}, args.output)
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace, settings: Settings) -> int:
    seed = args.seed if args.seed is not None else settings.master_seed
    if args.config:
        config = DatasetConfig.load(args.config)
        if args.seed is not None:
            config = DatasetConfig.from_dict({**config.to_dict(), "seed": seed})
    else:
        config = DatasetConfig(rooms=tuple(default_room_corpus(args.room_count, seed)), seed=seed)
    dataset = generate_dataset(config, settings.n_jobs)
    manifest = dataset.write(args.output)
    _emit({"manifest": str(manifest), "seed": config.seed, "rooms": len(config.rooms), "counts": dataset.counts()})
    return EXIT_OK


def cmd_train(args: argparse.Namespace, settings: Settings) -> int:
    seed = args.seed if args.seed is not None else settings.master_seed
    dataset = Dataset.load(args.dataset)
    samples, kept = dataset_samples(dataset, args.method, settings.n_jobs)
    model = fit_model(samples, _hyperparameters(args, args.top_k), seed, settings.n_jobs)
    model.save(args.output)
    _emit({
        "model": str(args.output),
        "pairs": kept.counts(),
        "selected_features": list(model.selected_features),
        "feature_names": list(model.feature_names),
    })
    return EXIT_OK


def _location_subsets(samples: list[PairSample], dataset_name: str) -> list[tuple[str, list[PairSample]]]:
    """One ``<dataset>.<n>`` subset per recording location, then the whole dataset."""
    locations = sorted({s.location for s in samples})
    if len(locations) < 2:
        return [(dataset_name, samples)]
    subsets = [(f"{dataset_name}.{loc + 1}", [s for s in samples if s.location == loc]) for loc in locations]
    return subsets + [(dataset_name, samples)]


def _model_rows(model: ForestModel, samples: list[PairSample], dataset_name: str) -> list[dict[str, Any]]:
    scores = predict_scores(model, np.stack([s.diff for s in samples]))
    report = ConfusionReport.from_predictions([s.copresent for s in samples], list(scores >= DECISION_THRESHOLD))
    logger.info(f"Model on {len(samples)} pairs of {dataset_name}: FNR {report.fnr:.3f}, FPR {report.fpr:.3f}")
    return [report.as_row(dataset=dataset_name, method="doubleecho", top_k=len(model.selected_features), fold="all")]


def _baseline_rows(dataset: Dataset, pair_ids: set[str], dataset_name: str) -> list[dict[str, Any]]:
    scorer = BaselineScorer()
    actual, predicted = [], []
    # Pairs are slot-major; consecutive pairs share recordings.
    for pair in dataset.pairs:
        if pair.pair_id not in pair_ids:
            continue
        result = scorer.score(pair.a, dataset.recordings[pair.a].signal, pair.b, dataset.recordings[pair.b].signal)
        actual.append(pair.label == COPRESENT)
        predicted.append(result.copresent)
    report = ConfusionReport.from_predictions(actual, predicted)
    logger.info(f"Cross-correlation baseline on {dataset_name}: FNR {report.fnr:.3f}, FPR {report.fpr:.3f}")
    return [report.as_row(dataset=dataset_name, method="xcorr", top_k="", fold="all")]


def cmd_evaluate(args: argparse.Namespace, settings: Settings) -> int:
    seed = args.seed if args.seed is not None else settings.master_seed
    dataset = Dataset.load(args.dataset)
    samples, kept = dataset_samples(dataset, args.method, settings.n_jobs)
    subsets = _location_subsets(samples, Path(args.dataset).name)

    rows: list[dict[str, Any]] = []
    if args.model:
        model = ForestModel.load(args.model)
        for name, subset in subsets:
            rows += _model_rows(model, subset, name)
    if args.cross_validate or not args.model:
        for name, subset in subsets:
            for top_k in args.top_k:
                result = cross_validate(
                    subset, args.folds, seed, _hyperparameters(args, top_k), n_jobs=settings.n_jobs
                )
                for fold, report in enumerate(result.folds):
                    rows.append(report.as_row(dataset=name, method="doubleecho", top_k=top_k, fold=fold))
                rows.append(result.aggregate.as_row(dataset=name, method="doubleecho", top_k=top_k, fold="all"))
                logger.info(f"{name} top-{top_k}: FNR {result.aggregate.fnr:.3f}, FPR {result.aggregate.fpr:.3f}")
    if args.baseline:
        for name, subset in subsets:
            rows += _baseline_rows(kept, {s.pair_id for s in subset}, name)

    if args.output:
        write_reports_csv(rows, args.output)
        logger.info(f"Wrote {len(rows)} rows to {args.output}")
    else:
        sys.stdout.write(reports_csv(rows))
    return EXIT_OK


def cmd_demo(args: argparse.Namespace, settings: Settings) -> int:
    seed = args.seed if args.seed is not None else settings.master_seed
    key = settings.session_key or demo_key(seed)
    if args.model:
        model = ForestModel.load(args.model)
    else:
        logger.info("No --model given; training a demo model on a small simulated corpus")
        model = demo_model(seed, n_jobs=settings.n_jobs)

    verifier_env, prover_env = scenario_environments(args.scenario, seed)
    spec = SweepSpec(amplitude=settings.sweep_amplitude)
    hooks = [relay] if args.scenario in ("relay", "manipulate") else []
    transport = InProcessTransport(hooks)

    outcome = run_session(key, model, verifier_env, prover_env, spec, transport, derive_seed(seed, _NONCE_KEY))
    attempts = 1
    if args.retry and outcome.abort_kind == "measurement":
        spec = extended_spec(spec)
        logger.info(f"Retrying with a {spec.sweep_duration:.1f} s sweep")
        outcome = run_session(key, model, verifier_env, prover_env, spec, transport, derive_seed(seed, _NONCE_KEY, 1))
        attempts = 2

    _emit({"scenario": args.scenario, "seed": seed, "attempts": attempts, **outcome.to_dict()})
    if outcome.aborted:
        logger.error(f"Session aborted: {outcome.abort_reason}")
        return EXIT_PROTOCOL
    return EXIT_OK


def _add_sweep_options(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("sweep")
    group.add_argument("--f-start", type=float, default=0.0, help="Sweep start frequency in Hz")
    group.add_argument("--f-end", type=float, default=22050.0, help="Sweep end frequency in Hz")
    group.add_argument("--duration", type=float, default=2.0, help="Sweep duration in seconds")
    group.add_argument("--lead-silence", type=float, default=1.0, help="Silence before the sweep in seconds")
    group.add_argument("--tail-silence", type=float, default=2.0, help="Silence after the sweep in seconds")
    group.add_argument("--amplitude", type=float, default=None, help="Peak amplitude (default from DOUBLEECHO_SWEEP_AMPLITUDE)")
    group.add_argument("--sample-rate", type=int, default=44100, help="Sample rate in Hz")


def _add_forest_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--trees", type=int, default=100, help="Number of trees")
    parser.add_argument("--max-depth", type=int, default=12, help="Maximum tree depth")


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="doubleecho",
        description="Copresence verification from room impulse responses.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="Log level (default from DOUBLEECHO_LOG_LEVEL)")
    subparsers = parser.add_subparsers(dest="command", required=True)

    gen = subparsers.add_parser("gen-sweep", help="Write the excitation sweep as a WAV file")
    gen.add_argument("output", help="WAV file to write")
    _add_sweep_options(gen)
    gen.set_defaults(handler=cmd_gen_sweep)

    analyze = subparsers.add_parser("analyze", help="Extract the feature vector of a recording")
    analyze.add_argument("recording", help="Recorded WAV file")
    analyze.add_argument("excitation", help="Excitation WAV file the recording was made with")
    analyze.add_argument("--method", choices=("matched_filter", "regularized_inverse"), default="matched_filter")
    analyze.add_argument("--include-ir", action="store_true", help="Include the impulse response samples")
    analyze.add_argument("--output", help="Write JSON here instead of stdout")
    _add_sweep_options(analyze)
    analyze.set_defaults(handler=cmd_analyze)

    simulate = subparsers.add_parser("simulate", help="Generate a simulated dataset")
    simulate.add_argument("output", help="Dataset directory to write")
    simulate.add_argument("--config", help="Dataset config (.json or .toml); default corpus when omitted")
    simulate.add_argument("--room-count", type=int, default=20, help="Rooms in the default corpus")
    simulate.add_argument("--seed", type=int, default=None, help="Master seed (default from DOUBLEECHO_SEED)")
    simulate.set_defaults(handler=cmd_simulate)

    train = subparsers.add_parser("train", help="Train a model on a simulated dataset")
    train.add_argument("dataset", help="Dataset directory")
    train.add_argument("output", help="Model JSON to write")
    train.add_argument("--top-k", type=int, default=50, help="Number of selected features")
    train.add_argument("--method", choices=("matched_filter", "regularized_inverse"), default="matched_filter")
    train.add_argument("--seed", type=int, default=None, help="Master seed (default from DOUBLEECHO_SEED)")
    _add_forest_options(train)
    train.set_defaults(handler=cmd_train)

    evaluate = subparsers.add_parser("evaluate", help="Confusion tables for a dataset")
    evaluate.add_argument("dataset", help="Dataset directory")
    evaluate.add_argument("--model", help="Model JSON to score every pair with")
    evaluate.add_argument("--cross-validate", action="store_true", help="Run k-fold cross-validation (default without --model)")
    evaluate.add_argument("--folds", type=int, default=5)
    evaluate.add_argument("--top-k", type=_top_k_list, default=DEFAULT_TOP_K, help="Comma-separated feature budgets, e.g. 10,20,30,50,100")
    evaluate.add_argument("--baseline", action="store_true", help="Add the cross-correlation baseline")
    evaluate.add_argument("--method", choices=("matched_filter", "regularized_inverse"), default="matched_filter")
    evaluate.add_argument("--seed", type=int, default=None, help="Master seed (default from DOUBLEECHO_SEED)")
    evaluate.add_argument("--output", help="Write CSV here instead of stdout")
    _add_forest_options(evaluate)
    evaluate.set_defaults(handler=cmd_evaluate)

    demo = subparsers.add_parser("demo", help="Run one verification session in the testbed")
    demo.add_argument("scenario", choices=SCENARIOS)
    demo.add_argument("--model", help="Model JSON (default: train a small demo model)")
    demo.add_argument("--retry", action="store_true", help="Retry once with a longer sweep after a failed measurement")
    demo.add_argument("--seed", type=int, default=None, help="Master seed (default from DOUBLEECHO_SEED)")
    demo.set_defaults(handler=cmd_demo)

    return parser


def _exit_code(error: Exception) -> int:
    if isinstance(error, ProtocolError):
        return EXIT_PROTOCOL
    if isinstance(error, (DegenerateSignalError, TruncationError, DecayRangeError, ClassError, MeasurementError)):
        return EXIT_PIPELINE
    return EXIT_USAGE


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        settings = Settings.from_env()
    except ConfigError as e:
        logging.basicConfig(format=LOG_FORMAT)
        logger.error(f"Configuration error: {e}")
        return EXIT_USAGE

    logging.basicConfig(level=(args.log_level or settings.log_level).upper(), format=LOG_FORMAT)
    tracer_provider = configure_tracing(settings)
    try:
        return args.handler(args, settings)
    except (ParameterError, ConfigError, WavFormatError, CommandError, OSError) as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_USAGE
    except DoubleEchoError as e:
        logger.error(f"{args.command}: {e}")
        return _exit_code(e)
    finally:
        tracer_provider.shutdown()


if __name__ == "__main__":
    sys.exit(main())
