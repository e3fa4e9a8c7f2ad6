"""Sweep merging algorithms over synthetic two-task fixtures.

Generates fixtures for each seed, computes per-expert statistics (diagonal
empirical Fisher and per-layer input Gram matrices) from each expert's own
task, runs every merging algorithm, and prints per-task accuracy.

    python scripts/sweep_merge.py --seeds 7 8 9 --scalings 0.1 0.3 0.5 1.0
"""

from __future__ import annotations

import argparse
import json
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from fusionkit.checkpoint_io import CheckpointRef, load_file
from fusionkit.ensemble_eval import PredictionMatrix, accuracy, load_dataset, max_model_predictor, mlp_forward, simple_ensemble
from fusionkit.merge_algorithms import MergeSpec, merge
from fusionkit.model_pool import ModelPool, task_vector_cosine_matrix
from fusionkit.synth import EXPERTS, TASKS, synth_fixtures


@dataclass
class SweepConfig:
    seeds: list[int] = field(default_factory=lambda: [7])
    scalings: list[float] = field(default_factory=lambda: [0.1, 0.3, 0.5, 1.0])
    trim_fraction: float = 0.2
    out: Path | None = None


def layer_inputs(model, x):
    """Inputs seen by each linear layer (features, then hidden activations)."""
    h = np.maximum(x @ model["layers.0.weight"].T.astype(np.float64) + model["layers.0.bias"], 0.0)
    return [x, h]


def fisher_diagonal(model, x, y):
    """Mean squared per-sample gradient of the cross-entropy loss."""
    w0, b0 = model["layers.0.weight"].astype(np.float64), model["layers.0.bias"].astype(np.float64)
    w1, b1 = model["layers.1.weight"].astype(np.float64), model["layers.1.bias"].astype(np.float64)
    pre = x @ w0.T + b0
    h = np.maximum(pre, 0.0)
    z = h @ w1.T + b1
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    dz = p.copy()
    dz[np.arange(len(y)), y] -= 1.0
    dh = (dz @ w1) * (pre > 0)
    n = len(y)
    return {
        "layers.0.bias": (dh**2).mean(axis=0).astype(np.float32),
        "layers.0.weight": ((dh**2).T @ (x**2) / n).astype(np.float32),
        "layers.1.bias": (dz**2).mean(axis=0).astype(np.float32),
        "layers.1.weight": ((dz**2).T @ (h**2) / n).astype(np.float32),
    }


def grams(model, x):
    return {f"layers.{i}.weight": inp.T @ inp for i, inp in enumerate(layer_inputs(model, x))}


def run_seed(seed: int, cfg: SweepConfig, workdir: Path) -> list[dict]:
    fx = workdir / f"seed{seed}"
    synth_fixtures(seed, fx)
    data = {t: load_dataset(fx / f"{t}.safetensors") for t in TASKS}
    experts = {e: load_file(fx / f"{e}.safetensors") for e in EXPERTS}
    own = dict(zip(EXPERTS, TASKS))
    x = {e: data[own[e]].features.astype(np.float64) for e in EXPERTS}

    refs = {e: CheckpointRef(fx / f"{e}.safetensors") for e in EXPERTS}
    base = CheckpointRef(fx / "base.safetensors")
    fisher = {e: fisher_diagonal(experts[e], x[e], data[own[e]].labels) for e in EXPERTS}
    gram = {e: grams(experts[e], x[e]) for e in EXPERTS}

    specs = [MergeSpec("simple_average"), MergeSpec("isotropic_merge"), MergeSpec("fisher_merging"), MergeSpec("regmean")]
    for lam in cfg.scalings:
        specs.append(MergeSpec("task_arithmetic", scaling=lam))
        specs.append(MergeSpec("ties_merging", scaling=lam, trim_fraction=cfg.trim_fraction))
    specs.append(MergeSpec("tall_mask"))

    rows = []

    def record(method, params, scores):
        rows.append({"seed": seed, "method": method, "params": params, **scores, "avg": float(np.mean(list(scores.values())))})

    for spec in specs:
        stats = fisher if spec.algorithm == "fisher_merging" else gram if spec.algorithm == "regmean" else None
        result = merge(ModelPool(refs, base=base, stats=stats), spec)
        scores = {t: accuracy(mlp_forward(result.model, d.features), d.labels) for t, d in data.items()}
        record(spec.algorithm, result.report.parameters, scores)

    for name, combine in (("simple_ensemble", simple_ensemble), ("max_model_predictor", max_model_predictor)):
        scores = {}
        for t, d in data.items():
            preds = [PredictionMatrix(e, mlp_forward(experts[e], d.features).scores) for e in EXPERTS]
            scores[t] = accuracy(combine(preds), d.labels)
        record(name, {}, scores)

    names, cos = task_vector_cosine_matrix(ModelPool(refs, base=base))
    print(f"seed {seed}: task-vector cosine {names[0]}/{names[1]} = {cos[0, 1]:+.3f}")
    return rows


def format_rows(rows: list[dict]) -> str:
    lines = [f"{'seed':>4}  {'method':<22} {'params':<40} " + " ".join(f"{t:>7}" for t in TASKS) + f" {'avg':>7}"]
    for r in rows:
        params = json.dumps(r["params"], sort_keys=True)
        lines.append(
            f"{r['seed']:>4}  {r['method']:<22} {params:<40} "
            + " ".join(f"{100 * r[t]:7.1f}" for t in TASKS)
            + f" {100 * r['avg']:7.1f}"
        )
    return "\n".join(lines)


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=SweepConfig().seeds)
    parser.add_argument("--scalings", type=float, nargs="+", default=SweepConfig().scalings)
    parser.add_argument("--trim-fraction", type=float, default=SweepConfig.trim_fraction)
    parser.add_argument("--out", type=Path, help="write all rows as JSON")
    args = parser.parse_args(argv)
    cfg = SweepConfig(args.seeds, args.scalings, args.trim_fraction, args.out)

    rows = []
    with tempfile.TemporaryDirectory() as tmp:
        for seed in cfg.seeds:
            rows.extend(run_seed(seed, cfg, Path(tmp)))
    print(format_rows(rows))
    if cfg.out is not None:
        payload = {"config": {**asdict(cfg), "out": str(cfg.out)}, "rows": rows}
        cfg.out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
