"""Standalone reference evaluation of an MLP checkpoint on dataset containers.

Deliberately independent of the fusionkit package: files are parsed with
``struct`` and the forward pass is written as plain Python loops, so its
numbers can cross-check ``fusionkit evaluate`` / ``fusionkit merge`` reports.

    python scripts/reference_eval.py out/merged.safetensors fx/task_a.safetensors fx/task_b.safetensors \
        --report out/report.json
"""

import argparse
import json
import struct
import sys
from pathlib import Path

FORMATS = {"F64": ("d", 8), "F32": ("f", 4), "F16": ("e", 2), "U8": ("B", 1), "I64": ("q", 8)}


def read_container(path):
    blob = Path(path).read_bytes()
    (n,) = struct.unpack_from("<Q", blob, 0)
    header = json.loads(blob[8 : 8 + n])
    header.pop("__metadata__", None)
    data = blob[8 + n :]
    out = {}
    for name, info in header.items():
        code, width = FORMATS[info["dtype"]]
        begin, end = info["data_offsets"]
        out[name] = (info["shape"], struct.unpack_from(f"<{(end - begin) // width}{code}", data, begin))
    return out


def rows(shape, flat):
    r, c = shape
    return [list(flat[i * c : (i + 1) * c]) for i in range(r)]


def forward(layers, x):
    for i, (w, b) in enumerate(layers):
        y = []
        for j, row in enumerate(w):
            s = b[j]
            for k, v in enumerate(row):
                s += v * x[k]
            y.append(max(s, 0.0) if i < len(layers) - 1 else s)
        x = y
    return x


def accuracy(layers, features, labels):
    hits = 0
    for x, label in zip(features, labels):
        logits = forward(layers, x)
        best = max(range(len(logits)), key=lambda c: (logits[c], -c))
        hits += best == label
    return hits / len(labels)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("model")
    parser.add_argument("datasets", nargs="+", help="dataset containers; task name = file stem")
    parser.add_argument("--report", help="compare against a fusionkit report JSON")
    parser.add_argument("--tol", type=float, default=1e-6)
    args = parser.parse_args(argv)

    ckpt = read_container(args.model)
    layers = []
    while f"layers.{len(layers)}.weight" in ckpt:
        i = len(layers)
        layers.append((rows(*ckpt[f"layers.{i}.weight"]), list(ckpt[f"layers.{i}.bias"][1])))

    results = {}
    for path in args.datasets:
        data = read_container(path)
        results[Path(path).stem] = accuracy(layers, rows(*data["features"]), data["labels"][1])
    results_avg = sum(results.values()) / len(results)
    print(json.dumps({"tasks": results, "average": results_avg}, indent=2, sort_keys=True))

    if args.report:
        report = json.loads(Path(args.report).read_text())
        bad = [t for t, v in results.items() if abs(report["tasks"].get(t, float("nan")) - v) > args.tol]
        if bad:
            print(f"MISMATCH on {bad}", file=sys.stderr)
            return 1
        print(f"report matches within {args.tol}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
