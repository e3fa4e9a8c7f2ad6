"""Deterministic toy fixtures: a base MLP, two experts, two tasks.

The base is a 16 -> 32 -> 4 ReLU MLP with small random weights. Each task
draws 4 Gaussian class clusters whose means live on that task's own 8
input dimensions; its expert adds a closed-form delta (class templates in
the first layer, a readout in the second) plus small noise to the base.
The two deltas touch disjoint hidden units, so their task vectors are close
to orthogonal.

All randomness comes from one PCG64 stream seeded with ``seed``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .checkpoint_io import atomic_write_bytes, save_map
from .ensemble_eval import LabeledDataset, accuracy, mlp_forward, save_dataset

RNG_NAME = "pcg64"
N_SAMPLES = 512
N_FEATURES = 16
N_HIDDEN = 32
N_CLASSES = 4
TASKS = ("task_a", "task_b")
EXPERTS = ("expert_a", "expert_b")

CLUSTER_SCALE = 2.5
CLUSTER_NOISE = 1.0
BASE_STD = 0.05
DELTA_NOISE = 0.01
TEMPLATE_GAIN = 1.0
READOUT_GAIN = 1.0


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def _template(task: int, cls: int) -> np.ndarray:
    t = np.zeros(N_FEATURES)
    t[8 * task + 2 * cls] = t[8 * task + 2 * cls + 1] = 1.0
    return t


def generate(seed: int):
    """Return ``(base, experts, datasets)`` as float32 tensor maps and datasets."""
    rng = make_rng(seed)
    shapes = {
        "layers.0.bias": (N_HIDDEN,),
        "layers.0.weight": (N_HIDDEN, N_FEATURES),
        "layers.1.bias": (N_CLASSES,),
        "layers.1.weight": (N_CLASSES, N_HIDDEN),
    }
    base = {k: rng.normal(0.0, BASE_STD, shape) for k, shape in shapes.items()}
    experts, datasets = {}, {}
    for t, (expert, task) in enumerate(zip(EXPERTS, TASKS)):
        delta = {k: rng.normal(0.0, DELTA_NOISE, shape) for k, shape in shapes.items()}
        means = np.zeros((N_CLASSES, N_FEATURES))
        for c in range(N_CLASSES):
            tmpl = _template(t, c)
            means[c] = CLUSTER_SCALE * tmpl
            # two hidden units per class, 16 units per task
            for row in (16 * t + c, 16 * t + 4 + c):
                delta["layers.0.weight"][row] += TEMPLATE_GAIN * tmpl / np.sqrt(2.0)
                delta["layers.1.weight"][c, row] += READOUT_GAIN
        experts[expert] = {k: (base[k] + delta[k]).astype(np.float32) for k in sorted(shapes)}
        labels = rng.permutation(np.arange(N_SAMPLES) % N_CLASSES)
        features = means[labels] + CLUSTER_NOISE * rng.standard_normal((N_SAMPLES, N_FEATURES))
        datasets[task] = LabeledDataset(features.astype(np.float32), labels.astype(np.int64), N_CLASSES)
    base = {k: base[k].astype(np.float32) for k in sorted(shapes)}
    return base, experts, datasets


def synth_fixtures(seed: int, outdir) -> dict:
    """Write fixtures and a manifest (with reference accuracies) to ``outdir``."""
    outdir = Path(outdir)
    base, experts, datasets = generate(seed)
    files = {"base": "base.safetensors"}
    save_map(base, outdir / files["base"])
    for name, model in experts.items():
        files[name] = f"{name}.safetensors"
        save_map(model, outdir / files[name])
    for name, ds in datasets.items():
        files[name] = f"{name}.safetensors"
        save_dataset(ds, outdir / files[name])

    accuracies = {
        model_name: {
            task: accuracy(mlp_forward(model, ds.features), ds.labels) for task, ds in datasets.items()
        }
        for model_name, model in [("base", base), *experts.items()]
    }
    manifest = {
        "seed": int(seed),
        "rng": RNG_NAME,
        "files": files,
        "experts": dict(zip(EXPERTS, TASKS)),
        "reference_accuracy": accuracies,
        "config": "config.yaml",
    }
    atomic_write_bytes(outdir / "config.yaml", _config_yaml(files).encode("utf-8"))
    atomic_write_bytes(
        outdir / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8")
    )
    return manifest


def _config_yaml(files: dict) -> str:
    return f"""\
method:
  algorithm: task_arithmetic
  scaling: 0.3
modelpool:
  base: {files['base']}
  models:
    expert_a: {files['expert_a']}
    expert_b: {files['expert_b']}
taskpool:
  - name: task_a
    path: {files['task_a']}
  - name: task_b
    path: {files['task_b']}
merged_model_save_path: out/merged.safetensors
report_save_path: out/report.json
seed: 0
"""
