"""Prediction-space ensembles and the task pool.

Ensembles operate on stored score matrices (``n_samples x n_classes``
logits): each model's rows are turned into probabilities with a
max-subtracted softmax in float64, then combined. The task pool evaluates
a checkpoint with a small ReLU MLP forward pass and reports per-task
accuracy plus the unweighted average.
"""

from __future__ import annotations

import datetime as _dt
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import __version__
from .checkpoint_io import atomic_write_bytes, load_file, save_map
from .errors import EmptyEnsemble, LengthMismatch, MalformedArchitecture, ShapeMismatch, ValidationError
from .merge_algorithms import _normalized_weights
from .tensor_core import TensorMap, widen

_LAYER_KEY = re.compile(r"layers\.(0|[1-9][0-9]*)\.(weight|bias)")


@dataclass
class PredictionMatrix:
    name: str
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[0] < 1:
            raise ShapeMismatch(self.name, self.scores.shape, ("n_samples>=1", "n_classes"))

    @property
    def shape(self):
        return self.scores.shape


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValidationError("dataset needs 2-D features and 1-D labels")
        if self.features.shape[0] != self.labels.shape[0]:
            raise LengthMismatch(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if self.labels.size and self.labels.min() < 0:
            raise ValidationError("labels must be non-negative")
        if self.n_classes is not None and self.labels.size and self.labels.max() >= self.n_classes:
            raise ValidationError(f"labels must lie in [0, {self.n_classes})")


def load_dataset(path) -> LabeledDataset:
    tensors = load_file(path)
    missing = {"features", "labels"} - set(tensors)
    if missing:
        raise ValidationError(f"{path}: dataset container lacks {sorted(missing)}")
    return LabeledDataset(tensors["features"], tensors["labels"])


def save_dataset(ds: LabeledDataset, path) -> None:
    save_map({"features": ds.features, "labels": ds.labels.astype(np.int64)}, path)


def load_predictions(path, name: str | None = None) -> PredictionMatrix:
    tensors = load_file(path)
    if "scores" not in tensors:
        raise ValidationError(f"{path}: prediction container lacks 'scores'")
    return PredictionMatrix(name or Path(path).stem, tensors["scores"])


def save_predictions(pred: PredictionMatrix, path) -> None:
    save_map({"scores": pred.scores}, path)


# --------------------------------------------------------------------------
# ensembles


def softmax(scores: np.ndarray) -> np.ndarray:
    z = widen(scores)
    with np.errstate(over="ignore"):
        # a row spanning more than the float range underflows to exact zeros
        z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _probabilities(preds: Sequence[PredictionMatrix]) -> list[np.ndarray]:
    if not preds:
        raise EmptyEnsemble("ensemble needs at least one prediction matrix")
    shape = preds[0].shape
    for p in preds[1:]:
        if p.shape != shape:
            raise ShapeMismatch(p.name, shape, p.shape)
    return [softmax(p.scores) for p in preds]


def simple_ensemble(preds: Sequence[PredictionMatrix]) -> PredictionMatrix:
    probs = _probabilities(preds)
    acc = np.zeros_like(probs[0])
    for p in probs:
        acc += p
    return PredictionMatrix("simple_ensemble", acc / len(probs))


def weighted_ensemble(preds: Sequence[PredictionMatrix], weights: Sequence[float]) -> PredictionMatrix:
    probs = _probabilities(preds)
    coeffs = _normalized_weights(weights, len(probs))
    if len(set(coeffs)) == 1:
        return PredictionMatrix("weighted_ensemble", simple_ensemble(preds).scores)
    acc = np.zeros_like(probs[0])
    for c, p in zip(coeffs, probs):
        acc += c * p
    return PredictionMatrix("weighted_ensemble", acc)


def max_model_predictor(preds: Sequence[PredictionMatrix]) -> PredictionMatrix:
    """Per sample, the probability row of the most confident model.

    Confidence is the row's maximum probability; ties pick the lowest index.
    """
    probs = np.stack(_probabilities(preds))  # (models, samples, classes)
    winner = np.argmax(probs.max(axis=2), axis=0)
    rows = probs[winner, np.arange(probs.shape[1])]
    return PredictionMatrix("max_model_predictor", rows)


ENSEMBLES = {
    "simple": simple_ensemble,
    "weighted": weighted_ensemble,
    "max_model": max_model_predictor,
}


# --------------------------------------------------------------------------
# inference and evaluation


def mlp_layers(model: Mapping[str, np.ndarray]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Parse ``layers.{i}.weight`` / ``layers.{i}.bias`` into (W, b) pairs."""
    found: dict[int, dict[str, np.ndarray]] = {}
    for key, value in model.items():
        m = _LAYER_KEY.fullmatch(key)
        if m is None:
            raise MalformedArchitecture(f"unexpected key {key!r}; expected layers.<i>.weight|bias")
        found.setdefault(int(m.group(1)), {})[m.group(2)] = value
    if not found:
        raise MalformedArchitecture("model has no layers")
    if sorted(found) != list(range(len(found))):
        raise MalformedArchitecture(f"layer indices must be consecutive from 0, got {sorted(found)}")
    layers = []
    for i in range(len(found)):
        parts = found[i]
        if set(parts) != {"weight", "bias"}:
            raise MalformedArchitecture(f"layer {i} needs both weight and bias")
        w, b = widen(parts["weight"]), widen(parts["bias"])
        if w.ndim != 2:
            raise MalformedArchitecture(f"layers.{i}.weight must be 2-D, got shape {w.shape}")
        if b.shape != (w.shape[0],):
            raise MalformedArchitecture(f"layers.{i}.bias has shape {b.shape}, expected {(w.shape[0],)}")
        if layers and layers[-1][0].shape[0] != w.shape[1]:
            raise MalformedArchitecture(
                f"layers.{i}.weight expects width {w.shape[1]}, previous layer gives {layers[-1][0].shape[0]}"
            )
        layers.append((w, b))
    return layers


def mlp_forward(model: Mapping[str, np.ndarray], features: np.ndarray, name: str = "mlp") -> PredictionMatrix:
    """Logits of a ReLU MLP; the last layer has no activation."""
    layers = mlp_layers(model)
    x = widen(features)
    if x.ndim != 2 or x.shape[1] != layers[0][0].shape[1]:
        raise MalformedArchitecture(
            f"features of shape {x.shape} do not match input width {layers[0][0].shape[1]}"
        )
    for i, (w, b) in enumerate(layers):
        x = x @ w.T + b
        if i < len(layers) - 1:
            x = np.maximum(x, 0.0)
    return PredictionMatrix(name, x)


def accuracy(preds: PredictionMatrix | np.ndarray, labels: Sequence[int]) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    scores = preds.scores if isinstance(preds, PredictionMatrix) else np.asarray(preds)
    labels = np.asarray(labels)
    if scores.shape[0] != labels.shape[0]:
        raise LengthMismatch(f"{scores.shape[0]} predictions but {labels.shape[0]} labels")
    if labels.size == 0:
        return 0.0
    return float(np.count_nonzero(np.argmax(scores, axis=1) == labels)) / labels.size


@dataclass
class EvalReport:
    tasks: dict[str, float]
    algorithm: str | None = None
    spec: dict[str, Any] = field(default_factory=dict)
    timestamp: str = field(default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat())
    version: str = __version__

    @property
    def average(self) -> float:
        return float(np.mean(list(self.tasks.values()))) if self.tasks else float("nan")

    def to_dict(self) -> dict:
        spec = {k: list(v) if isinstance(v, tuple) else v for k, v in self.spec.items()}
        return {
            "algorithm": self.algorithm,
            "average": self.average,
            "spec": dict(sorted(spec.items())),
            "tasks": dict(sorted(self.tasks.items())),
            "timestamp": self.timestamp,
            "version": self.version,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_json().encode("utf-8"))

    def format_table(self) -> str:
        names = list(self.tasks) + ["Avg."]
        values = [100 * v for v in self.tasks.values()] + [100 * self.average]
        widths = [max(len(n), 6) for n in names]
        head = " | ".join(n.rjust(w) for n, w in zip(names, widths))
        row = " | ".join(f"{v:.1f}".rjust(w) for v, w in zip(values, widths))
        return f"{head}\n{row}"


def evaluate(
    model: TensorMap,
    tasks: Sequence[tuple[str, LabeledDataset]],
    algorithm: str | None = None,
    spec: Mapping[str, Any] | None = None,
) -> EvalReport:
    if not tasks:
        raise ValidationError("evaluation needs at least one task")
    layers = mlp_layers(model)
    n_classes = layers[-1][0].shape[0]
    results = {}
    for name, ds in tasks:
        if ds.labels.size and ds.labels.max() >= n_classes:
            raise ValidationError(f"task {name!r} has labels beyond the model's {n_classes} classes")
        results[name] = accuracy(mlp_forward(model, ds.features, name), ds.labels)
    return EvalReport(results, algorithm=algorithm, spec=dict(spec or {}))
