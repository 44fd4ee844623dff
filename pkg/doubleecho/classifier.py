"""Pairwise copresence classification.

Pairs of feature vectors become squared-difference vectors, the forest is
trained with scikit-learn on an undersampled set restricted to the top-k most
important features, and the trained trees are exported into a plain
``ForestModel`` that predicts without scikit-learn and serializes to JSON.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from collections import OrderedDict
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import fft as spfft
from scipy import signal as sps
from sklearn.ensemble import RandomForestClassifier
from sklearn.model_selection import StratifiedKFold

from doubleecho.config import derive_seed
from doubleecho.errors import ClassError, ConfigError, DegenerateSignalError, ParameterError
from doubleecho.features import FeatureVector, standard_band_plan
from doubleecho.signal import AudioSignal
from doubleecho.simulator import COPRESENT, NON_COPRESENT, Label, RecordingPair
from doubleecho.telemetry import get_tracer

logger = logging.getLogger(__name__)

FEATURE_COUNT = 224
MODEL_FORMAT_VERSION = 1
DECISION_THRESHOLD = 0.5
BASELINE_THRESHOLD = 0.6
REPORT_FIELDS = ("dataset", "method", "top_k", "fold", "tp", "fn", "fp", "tn", "fnr", "fpr")


@dataclass(frozen=True, eq=False)
class PairSample:
    diff: np.ndarray
    label: Label
    pair_id: str = ""
    room_a: int = -1
    room_b: int = -1
    location: int = 0

    def __post_init__(self):
        diff = np.array(self.diff, dtype=np.float64)
        if diff.ndim != 1 or not np.all(np.isfinite(diff)) or np.any(diff < 0):
            raise ParameterError("pair diff must be a 1-D vector of finite non-negative values")
        if self.label not in (COPRESENT, NON_COPRESENT):
            raise ParameterError(f"unknown label {self.label!r}")
        diff.setflags(write=False)
        object.__setattr__(self, "diff", diff)

    @property
    def copresent(self) -> bool:
        return self.label == COPRESENT


@dataclass(frozen=True)
class ForestHyperparameters:
    tree_count: int = 100
    max_depth: int = 12
    min_leaf: int = 2
    mtry: int = 8
    top_k: int = 50

    def __post_init__(self):
        for name in ("tree_count", "max_depth", "min_leaf", "mtry", "top_k"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.top_k > FEATURE_COUNT:
            raise ParameterError(f"top_k cannot exceed {FEATURE_COUNT}, got {self.top_k}")

    @classmethod
    def for_top_k(cls, top_k: int, **overrides: int) -> ForestHyperparameters:
        """Defaults for a feature budget, with mtry = ⌈√top_k⌉."""
        return cls(top_k=top_k, mtry=overrides.pop("mtry", math.ceil(math.sqrt(top_k))), **overrides)


def _as_values(vector: FeatureVector | Sequence[float] | np.ndarray) -> np.ndarray:
    if isinstance(vector, FeatureVector):
        return vector.values
    return np.asarray(vector, dtype=np.float64)


def pair_features(fa: FeatureVector | Sequence[float], fb: FeatureVector | Sequence[float]) -> np.ndarray:
    """Component-wise squared difference of two feature vectors."""
    a, b = _as_values(fa), _as_values(fb)
    if a.shape != b.shape or a.ndim != 1:
        raise ParameterError(f"feature vectors differ in shape: {a.shape} vs {b.shape}")
    return (a - b) ** 2


def build_pair_samples(pairs: Iterable[RecordingPair], features: Mapping[str, FeatureVector]) -> list[PairSample]:
    """Pair samples for every pair whose two recordings both have features."""
    samples = []
    for pair in pairs:
        if pair.a in features and pair.b in features:
            diff = pair_features(features[pair.a], features[pair.b])
            samples.append(PairSample(diff, pair.label, pair.pair_id, pair.room_a, pair.room_b, pair.location))
    return samples


def _split_by_class(samples: Sequence[PairSample]) -> tuple[list[int], list[int]]:
    copresent = [i for i, s in enumerate(samples) if s.copresent]
    other = [i for i, s in enumerate(samples) if not s.copresent]
    if not copresent or not other:
        raise ClassError(f"need both classes, got {len(copresent)} copresent and {len(other)} non-copresent samples")
    return copresent, other


def undersample(samples: Sequence[PairSample], seed: int) -> list[PairSample]:
    """Keep the minority class and an equally large seeded draw from the majority, in input order."""
    copresent, other = _split_by_class(samples)
    minority, majority = (copresent, other) if len(copresent) <= len(other) else (other, copresent)
    rng = np.random.default_rng(seed)
    drawn = rng.choice(len(majority), size=len(minority), replace=False)
    keep = sorted(minority + [majority[i] for i in drawn])
    return [samples[i] for i in keep]


def _matrix(samples: Sequence[PairSample]) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([s.diff for s in samples])
    y = np.array([1 if s.copresent else 0 for s in samples])
    return X, y


def rank_features(
    train: Sequence[PairSample],
    seed: int,
    hp: ForestHyperparameters = ForestHyperparameters(),
    n_jobs: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Feature indices by decreasing mean impurity decrease (ties to the lower index), with the importances."""
    _split_by_class(train)
    X, y = _matrix(train)
    auxiliary = RandomForestClassifier(
        n_estimators=hp.tree_count,
        max_depth=hp.max_depth,
        min_samples_leaf=hp.min_leaf,
        max_features="sqrt",
        random_state=seed,
        n_jobs=n_jobs,
    ).fit(X, y)
    importances = auxiliary.feature_importances_
    order = np.lexsort((np.arange(len(importances)), -importances))
    return order, importances


def select_features(
    train: Sequence[PairSample],
    k: int = 50,
    seed: int = 0,
    hp: ForestHyperparameters = ForestHyperparameters(),
    n_jobs: int = 1,
) -> tuple[int, ...]:
    """The ``k`` most important feature indices, in ascending index order."""
    if not train:
        raise ParameterError("select_features needs training samples")
    width = len(train[0].diff)
    if not 1 <= k <= width:
        raise ParameterError(f"k must lie in [1, {width}], got {k}")
    order, _ = rank_features(train, seed, hp, n_jobs)
    return tuple(sorted(int(i) for i in order[:k]))


@dataclass(frozen=True, eq=False)
class DecisionTree:
    """Flat node arrays. Leaves have ``feature == -1``; ``proba`` rows are [non_copresent, copresent]."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    proba: np.ndarray

    def leaves(self, X32: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X32), dtype=np.int64)
        rows = np.arange(len(X32))
        while True:
            active = self.feature[node] >= 0
            if not active.any():
                return node
            feature = np.where(active, self.feature[node], 0)
            go_left = X32[rows, feature] <= self.threshold[node]
            node = np.where(active, np.where(go_left, self.left[node], self.right[node]), node)

    def copresent_proba(self, X32: np.ndarray) -> np.ndarray:
        return self.proba[self.leaves(X32), 1]

    def split_features(self) -> set[int]:
        return {int(f) for f in self.feature if f >= 0}

    def to_dict(self, node: int = 0) -> dict[str, Any]:
        if self.feature[node] < 0:
            return {"leaf": [float(p) for p in self.proba[node]]}
        return {
            "feature": int(self.feature[node]),
            "threshold": float(self.threshold[node]),
            "left": self.to_dict(int(self.left[node])),
            "right": self.to_dict(int(self.right[node])),
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> DecisionTree:
        feature, threshold, left, right, proba = [], [], [], [], []

        def visit(node: dict[str, Any]) -> int:
            index = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            proba.append([0.0, 0.0])
            if "leaf" in node:
                proba[index] = list(node["leaf"])
            else:
                feature[index] = int(node["feature"])
                threshold[index] = float(node["threshold"])
                left[index] = visit(node["left"])
                right[index] = visit(node["right"])
            return index

        visit(doc)
        return cls(
            np.array(feature, dtype=np.int64),
            np.array(threshold, dtype=np.float64),
            np.array(left, dtype=np.int64),
            np.array(right, dtype=np.int64),
            np.array(proba, dtype=np.float64),
        )

    @classmethod
    def from_sklearn(cls, estimator: Any, selected: Sequence[int]) -> DecisionTree:
        """Export a fitted ``DecisionTreeClassifier`` trained on the ``selected`` columns."""
        classes = [int(c) for c in estimator.classes_]
        if classes != [0, 1]:
            raise ClassError(f"tree must be fit on labels [0, 1], got {classes}")
        tree = estimator.tree_
        leaf = tree.children_left < 0
        mapping = np.asarray(selected, dtype=np.int64)
        feature = np.where(leaf, -1, mapping[np.where(leaf, 0, tree.feature)])
        value = tree.value[:, 0, :].astype(np.float64)
        totals = value.sum(axis=1, keepdims=True)
        proba = np.divide(value, totals, out=np.full_like(value, 0.5), where=totals > 0)
        return cls(
            feature.astype(np.int64),
            np.where(leaf, 0.0, tree.threshold).astype(np.float64),
            tree.children_left.astype(np.int64),
            tree.children_right.astype(np.int64),
            proba,
        )


@dataclass(frozen=True, eq=False)
class ForestModel:
    trees: tuple[DecisionTree, ...]
    selected_features: tuple[int, ...]
    seed: int
    hyperparameters: ForestHyperparameters
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        selected = set(self.selected_features)
        for tree in self.trees:
            if not tree.split_features() <= selected:
                raise ParameterError("a tree splits on a feature outside selected_features")
            leaves = tree.feature < 0
            proba = tree.proba[leaves]
            if np.any(proba < 0) or np.any(proba > 1) or not np.allclose(proba.sum(axis=1), 1.0):
                raise ParameterError("leaf probabilities must lie in [0, 1] and sum to 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "seed": self.seed,
            "hyperparameters": asdict(self.hyperparameters),
            "selected_features": list(self.selected_features),
            "feature_names": list(self.feature_names),
            "trees": [tree.to_dict() for tree in self.trees],
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> ForestModel:
        if doc.get("format_version") != MODEL_FORMAT_VERSION:
            raise ConfigError(f"unsupported model format {doc.get('format_version')!r}")
        return cls(
            trees=tuple(DecisionTree.from_dict(tree) for tree in doc["trees"]),
            selected_features=tuple(doc["selected_features"]),
            seed=doc["seed"],
            hyperparameters=ForestHyperparameters(**doc["hyperparameters"]),
            feature_names=tuple(doc.get("feature_names", ())),
        )

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> ForestModel:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"model file {path} does not exist") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        return cls.from_dict(doc)


@dataclass(frozen=True)
class Prediction:
    copresent: bool
    score: float

    @property
    def verdict(self) -> Label:
        return COPRESENT if self.copresent else NON_COPRESENT


def predict_scores(model: ForestModel, X: np.ndarray) -> np.ndarray:
    """Mean copresent leaf probability over trees, one score per row of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != FEATURE_COUNT:
        raise ParameterError(f"expected {FEATURE_COUNT} features per row, got {X.shape[1]}")
    X32 = X.astype(np.float32)
    return np.mean([tree.copresent_proba(X32) for tree in model.trees], axis=0)


def predict(model: ForestModel, diff: Sequence[float] | np.ndarray) -> Prediction:
    diff = np.asarray(diff, dtype=np.float64)
    if diff.shape != (FEATURE_COUNT,):
        raise ParameterError(f"expected a {FEATURE_COUNT}-value diff vector, got shape {diff.shape}")
    score = float(predict_scores(model, diff[None, :])[0])
    return Prediction(score >= DECISION_THRESHOLD, score)


def train_forest(
    train: Sequence[PairSample],
    selected: Sequence[int],
    hp: ForestHyperparameters = ForestHyperparameters(),
    seed: int = 0,
    n_jobs: int = 1,
) -> ForestModel:
    """Fit ``hp.tree_count`` bootstrapped Gini trees on the ``selected`` columns."""
    _split_by_class(train)
    selected = tuple(sorted(int(i) for i in selected))
    if not selected:
        raise ParameterError("train_forest needs at least one selected feature")
    with get_tracer().start_as_current_span("classifier.train_forest") as span:
        span.set_attribute("doubleecho.samples", len(train))
        span.set_attribute("doubleecho.trees", hp.tree_count)
        X, y = _matrix(train)
        forest = RandomForestClassifier(
            n_estimators=hp.tree_count,
            max_depth=hp.max_depth,
            min_samples_leaf=hp.min_leaf,
            max_features=min(hp.mtry, len(selected)),
            bootstrap=True,
            random_state=seed,
            n_jobs=n_jobs,
        ).fit(X[:, list(selected)], y)

        names = standard_band_plan().feature_names()
        model = ForestModel(
            trees=tuple(DecisionTree.from_sklearn(est, selected) for est in forest.estimators_),
            selected_features=selected,
            seed=seed,
            hyperparameters=hp,
            feature_names=tuple(names[i] for i in selected) if X.shape[1] == FEATURE_COUNT else (),
        )
        logger.debug(f"Trained {hp.tree_count} trees on {len(train)} samples")
        return model


def fit_model(
    samples: Sequence[PairSample],
    hp: ForestHyperparameters = ForestHyperparameters(),
    seed: int = 0,
    n_jobs: int = 1,
) -> ForestModel:
    """Undersample, select the top ``hp.top_k`` features, then train."""
    balanced = undersample(samples, derive_seed(seed, 0))
    selected = select_features(balanced, hp.top_k, derive_seed(seed, 1), hp, n_jobs)
    return train_forest(balanced, selected, hp, derive_seed(seed, 2), n_jobs)


@dataclass(frozen=True)
class ConfusionReport:
    tp: int = 0
    fn: int = 0
    fp: int = 0
    tn: int = 0

    @property
    def fnr(self) -> float:
        positives = self.tp + self.fn
        return self.fn / positives if positives else 0.0

    @property
    def fpr(self) -> float:
        negatives = self.fp + self.tn
        return self.fp / negatives if negatives else 0.0

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    def __add__(self, other: ConfusionReport) -> ConfusionReport:
        return ConfusionReport(self.tp + other.tp, self.fn + other.fn, self.fp + other.fp, self.tn + other.tn)

    @classmethod
    def from_predictions(cls, actual: Sequence[bool], predicted: Sequence[bool]) -> ConfusionReport:
        actual_arr = np.asarray(actual, dtype=bool)
        predicted_arr = np.asarray(predicted, dtype=bool)
        return cls(
            tp=int(np.sum(actual_arr & predicted_arr)),
            fn=int(np.sum(actual_arr & ~predicted_arr)),
            fp=int(np.sum(~actual_arr & predicted_arr)),
            tn=int(np.sum(~actual_arr & ~predicted_arr)),
        )

    def as_row(self, **context: Any) -> dict[str, Any]:
        return {
            **context,
            "tp": self.tp,
            "fn": self.fn,
            "fp": self.fp,
            "tn": self.tn,
            "fnr": f"{self.fnr:.6f}",
            "fpr": f"{self.fpr:.6f}",
        }


def reports_csv(rows: Iterable[dict[str, Any]]) -> str:
    """Confusion rows as CSV text with a header line."""
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=REPORT_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buffer.getvalue()


def write_reports_csv(rows: Iterable[dict[str, Any]], path: str | os.PathLike) -> None:
    Path(path).write_text(reports_csv(rows))


Predictor = Callable[[Sequence[PairSample]], Sequence[bool]]
Trainer = Callable[[Sequence[PairSample], int], Predictor]


def forest_trainer(hp: ForestHyperparameters = ForestHyperparameters(), n_jobs: int = 1) -> Trainer:
    def train(samples: Sequence[PairSample], seed: int) -> Predictor:
        model = fit_model(samples, hp, seed, n_jobs)

        def classify(test: Sequence[PairSample]) -> Sequence[bool]:
            scores = predict_scores(model, np.stack([s.diff for s in test]))
            return list(scores >= DECISION_THRESHOLD)

        return classify

    return train


@dataclass(frozen=True)
class CrossValidation:
    aggregate: ConfusionReport
    folds: list[ConfusionReport] = field(default_factory=list)
    test_indices: list[list[int]] = field(default_factory=list)


def cross_validate(
    samples: Sequence[PairSample],
    folds: int = 5,
    seed: int = 0,
    hp: ForestHyperparameters = ForestHyperparameters(),
    trainer: Trainer | None = None,
    n_jobs: int = 1,
) -> CrossValidation:
    """Stratified k-fold evaluation; every fold trains from scratch on its training part only.

    Test folds keep the natural class imbalance.
    """
    copresent, other = _split_by_class(samples)
    if min(len(copresent), len(other)) < folds:
        raise ParameterError(f"need at least {folds} samples per class, got {len(copresent)} and {len(other)}")
    trainer = trainer or forest_trainer(hp, n_jobs)
    labels = np.array([s.copresent for s in samples])
    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed % 2**32)

    with get_tracer().start_as_current_span("classifier.cross_validate") as span:
        span.set_attribute("doubleecho.samples", len(samples))
        span.set_attribute("doubleecho.folds", folds)
        reports, test_indices = [], []
        for fold, (train_idx, test_idx) in enumerate(splitter.split(np.zeros(len(samples)), labels)):
            with get_tracer().start_as_current_span("classifier.fold") as fold_span:
                fold_span.set_attribute("doubleecho.fold", fold)
                classify = trainer([samples[i] for i in train_idx], derive_seed(seed, fold))
                test = [samples[i] for i in test_idx]
                report = ConfusionReport.from_predictions(labels[test_idx], classify(test))
                logger.info(f"Fold {fold}: FNR {report.fnr:.3f}, FPR {report.fpr:.3f} on {len(test)} pairs")
                reports.append(report)
                test_indices.append([int(i) for i in test_idx])

        aggregate = sum(reports, ConfusionReport())
        span.set_attribute("doubleecho.fnr", aggregate.fnr)
        span.set_attribute("doubleecho.fpr", aggregate.fpr)
        return CrossValidation(aggregate, reports, test_indices)


@dataclass(frozen=True)
class BaselineResult:
    similarity: float
    copresent: bool


def _normalized_xcorr_max(a: np.ndarray, b: np.ndarray) -> float:
    norm = float(np.linalg.norm(a) * np.linalg.norm(b))
    if norm == 0.0:
        raise DegenerateSignalError("cross-correlation baseline needs non-silent recordings")
    return float(np.max(sps.correlate(a, b, mode="full", method="fft")) / norm)


def baseline_xcorr(rec_a: AudioSignal, rec_b: AudioSignal, threshold: float = BASELINE_THRESHOLD) -> BaselineResult:
    """Maximum normalized cross-correlation between two raw recordings."""
    if rec_a.sample_rate != rec_b.sample_rate:
        raise ParameterError(f"sample rate mismatch: {rec_a.sample_rate} Hz vs {rec_b.sample_rate} Hz")
    similarity = _normalized_xcorr_max(rec_a.samples, rec_b.samples)
    return BaselineResult(similarity, similarity >= threshold)


class BaselineScorer:
    """Cross-correlation baseline over many pairs with a bounded cache of recording spectra."""

    def __init__(self, threshold: float = BASELINE_THRESHOLD, cache_size: int = 96):
        self.threshold = threshold
        self.cache_size = cache_size
        self._spectra: OrderedDict[tuple[str, int], tuple[np.ndarray, float]] = OrderedDict()

    def _spectrum(self, key: str, signal: AudioSignal, nfft: int) -> tuple[np.ndarray, float]:
        cache_key = (key, nfft)
        if cache_key in self._spectra:
            self._spectra.move_to_end(cache_key)
            return self._spectra[cache_key]
        entry = (spfft.rfft(signal.samples.astype(np.float32), nfft), float(np.linalg.norm(signal.samples)))
        self._spectra[cache_key] = entry
        if len(self._spectra) > self.cache_size:
            self._spectra.popitem(last=False)
        return entry

    def score(self, key_a: str, rec_a: AudioSignal, key_b: str, rec_b: AudioSignal) -> BaselineResult:
        if rec_a.sample_rate != rec_b.sample_rate:
            raise ParameterError(f"sample rate mismatch: {rec_a.sample_rate} Hz vs {rec_b.sample_rate} Hz")
        nfft = spfft.next_fast_len(len(rec_a) + len(rec_b) - 1, real=True)
        spec_a, norm_a = self._spectrum(key_a, rec_a, nfft)
        spec_b, norm_b = self._spectrum(key_b, rec_b, nfft)
        if norm_a == 0.0 or norm_b == 0.0:
            raise DegenerateSignalError("cross-correlation baseline needs non-silent recordings")
        similarity = float(np.max(spfft.irfft(spec_a * np.conj(spec_b), nfft)) / (norm_a * norm_b))
        return BaselineResult(similarity, similarity >= self.threshold)
