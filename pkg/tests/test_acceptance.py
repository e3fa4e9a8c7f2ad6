"""Acceptance criteria, one test per criterion.

Each test runs under its stated time budget and records a PASS/FAIL line,
printed at the end of the session (see ``conftest.pytest_terminal_summary``).
Run alone with ``pytest tests/test_acceptance.py``.
"""

import contextlib
import json
import random
import struct
import time

import ml_dtypes
import numpy as np
import pytest

from fusionkit.checkpoint_io import CheckpointRef, load_all, open_lazy, save_map
from fusionkit.cli import main
from fusionkit.ensemble_eval import PredictionMatrix, max_model_predictor, simple_ensemble, softmax, weighted_ensemble
from fusionkit.errors import CheckpointIOError
from fusionkit.merge_algorithms import (
    MERGING_ALGORITHMS,
    MergeSpec,
    fisher_merging,
    isotropic_merge,
    regmean,
    run,
    simple_average,
    tall_mask,
    task_arithmetic,
    ties_merging,
    weighted_average,
)
from fusionkit.model_pool import ModelPool, task_vector_cosine_matrix
from fusionkit.tensor_core import svd_2d
from oracles import count_accuracy, forward_logits, read_safetensors, tall_reference, ties_reference

RESULTS: dict[int, str] = {}

TOY = {"a.bias": (4,), "a.weight": (4, 3), "b.weight": (2, 4), "scalar": ()}


@contextlib.contextmanager
def criterion(number: int, title: str, budget: float):
    start = time.perf_counter()
    status, detail = "FAIL", ""
    try:
        yield
        elapsed = time.perf_counter() - start
        if elapsed >= budget:
            detail = f" over budget {budget:.0f}s"
            raise AssertionError(f"criterion {number} took {elapsed:.2f}s, budget {budget}s")
        status = "PASS"
    finally:
        elapsed = time.perf_counter() - start
        line = f"criterion {number:2d}: {status}  {title} ({elapsed:.2f}s / {budget:.0f}s){detail}"
        RESULTS[number] = line
        print(line)


def toy_map(rng, dtype=np.float64):
    return {k: np.asarray(rng.standard_normal(s)).astype(dtype) for k, s in sorted(TOY.items())}


def rel_close(a, b, rtol):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(1.0, float(np.max(np.abs(b), initial=0.0)))
    return bool(np.all(np.abs(a - b) <= rtol * scale))


def copies_pool(name, m, n):
    models = {f"m{i}": m for i in range(n)}
    stats = None
    if name == "fisher_merging":
        stats = {k: {key: np.full(v.shape, 0.5) for key, v in m.items()} for k in models}
    if name == "regmean":
        stats = {k: {key: np.eye(v.shape[1]) for key, v in m.items() if v.ndim == 2} for k in models}
    return ModelPool(models, base=m, stats=stats)


def test_criterion_01_idempotence(rng):
    with criterion(1, "idempotence over all merging algorithms, N in {1,2,5}", 5):
        m = toy_map(rng)
        for name in MERGING_ALGORITHMS:
            for n in (1, 2, 5):
                extra = {"weights": [1.0] * n} if name == "weighted_average" else {}
                out = run(copies_pool(name, m, n), MergeSpec(name, **extra))
                assert list(out) == list(m), name
                for k in m:
                    assert rel_close(out[k], m[k], 1e-6), (name, n, k)


def test_criterion_02_analytic_reductions(rng):
    with criterion(2, "analytic reductions to simple_average and base", 5):
        models = {f"m{i}": toy_map(rng) for i in range(4)}
        base = toy_map(rng)
        pool = ModelPool(models, base=base)
        avg = simple_average(pool)

        wavg = weighted_average(pool, [0.25] * 4)
        for k in avg:
            assert np.array_equal(wavg[k], avg[k]), k

        fisher_pool = ModelPool(
            models, base=base, stats={n: {k: np.full(v.shape, 3.7) for k, v in m.items()} for n, m in models.items()}
        )
        fused = fisher_merging(fisher_pool)
        for k in avg:
            assert rel_close(fused[k], avg[k], 1e-6), k

        gram_pool = ModelPool(
            models,
            base=base,
            stats={n: {k: np.eye(v.shape[1]) for k, v in m.items() if v.ndim == 2} for n, m in models.items()},
        )
        solved = regmean(gram_pool)
        for k in ("a.weight", "b.weight"):
            assert rel_close(solved[k], avg[k], 1e-5), k

        ta = task_arithmetic(pool, 0.0)
        for k in base:
            assert np.array_equal(ta[k], base[k]), k


def test_criterion_03_ties_oracle():
    with criterion(3, "TIES matches stage-by-stage reference on 1200 instances", 10):
        gen = np.random.default_rng(3)
        checked = 0
        for _ in range(1200):
            n = int(gen.integers(1, 4))
            d = int(gen.integers(1, 9))
            k = float(gen.choice([0.25, 0.5, 1.0]))
            split = int(gen.integers(0, d + 1))  # spread elements over two keys
            if gen.random() < 0.3:
                taus = [gen.integers(-3, 4, d).astype(np.float64) for _ in range(n)]  # magnitude ties
            else:
                taus = [gen.standard_normal(d) for _ in range(n)]
            base_flat = gen.standard_normal(d)

            def as_map(flat):
                return {"p": flat[:split].copy(), "q": flat[split:].copy()}

            pool = ModelPool({f"m{i}": as_map(base_flat + t) for i, t in enumerate(taus)}, base=as_map(base_flat))
            out = ties_merging(pool, scaling=1.0, trim_fraction=k)
            got = np.concatenate([out["p"], out["q"]])
            effective = [((base_flat + t) - base_flat).tolist() for t in taus]
            want = [b + m for b, m in zip(base_flat.tolist(), ties_reference(effective, k))]
            assert got.tolist() == want, (taus, k)
            checked += 1
        assert checked >= 1000


def test_criterion_04_tall_oracle():
    with criterion(4, "TALL masks match per-coordinate inequality exactly", 5):
        gen = np.random.default_rng(4)
        for _ in range(500):
            n = int(gen.integers(1, 5))
            d = int(gen.integers(1, 10))
            lam = float(gen.choice([0.0, 0.2, 0.4, 1.0, float(gen.uniform(0, 3))]))
            taus = [gen.standard_normal(d) * (gen.random() < 0.8) for _ in range(n)]
            pool = ModelPool({f"m{i}": {"w": t} for i, t in enumerate(taus)}, base={"w": np.zeros(d)})
            _, masks = tall_mask(pool, lam)
            want = tall_reference([t.tolist() for t in taus], lam)
            for i in range(n):
                mask = masks[f"m{i}"]["w"]
                assert mask.dtype == np.uint8
                assert mask.tolist() == want[i]
                if lam == 0:
                    assert np.all(mask == 1)


def test_criterion_05_isotropic():
    with criterion(5, "isotropic output spectrum is flat at the mean; SVD reconstructs", 10):
        gen = np.random.default_rng(5)
        for i in range(100):
            r, c = int(gen.integers(1, 9)), int(gen.integers(1, 9))
            delta = gen.standard_normal((r, c)) * 10.0 ** gen.uniform(-3, 3)
            if i % 10 == 0 and min(r, c) > 1:
                delta[:, 0] = delta[:, -1]  # rank deficient
            base = gen.standard_normal((r, c))
            out = isotropic_merge(ModelPool({"m": {"w": base + delta}}, base={"w": base}))["w"]

            u, s, vt = svd_2d(delta)
            norm = np.linalg.norm(delta)
            assert np.linalg.norm(u @ np.diag(s) @ vt - delta) <= 1e-5 * norm
            target = s.mean()

            iso = out - base
            u2, s2, vt2 = svd_2d(iso)
            assert np.all(np.abs(s2 - target) <= 1e-5 * target), (s2, target)
            assert np.linalg.norm(u2 @ np.diag(s2) @ vt2 - iso) <= 1e-5 * np.linalg.norm(iso)


def _mutate(blob: bytes, gen: random.Random) -> bytes:
    (n,) = struct.unpack("<Q", blob[:8])
    header = bytearray(blob[8 : 8 + n])
    data = blob[8 + n :]
    kind = gen.randrange(8)
    if kind == 0:  # flip random header bytes
        for _ in range(gen.randint(1, 4)):
            header[gen.randrange(len(header))] = gen.randrange(256)
    elif kind == 1:  # truncate anywhere
        return blob[: gen.randrange(len(blob))]
    elif kind == 2:  # lie about header length
        return struct.pack("<Q", gen.choice([0, 1, n - 1, n + 1, n + 100, 2**63, 2**64 - 1, gen.randrange(2**40)])) + blob[8:]
    elif kind == 3:  # delete a span of header
        a = gen.randrange(len(header))
        del header[a : a + gen.randint(1, 8)]
    elif kind == 4:  # insert junk
        a = gen.randrange(len(header) + 1)
        header[a:a] = bytes(gen.randrange(256) for _ in range(gen.randint(1, 8)))
    elif kind == 5:  # semantic JSON mutation
        doc = json.loads(header)
        keys = [k for k in doc if k != "__metadata__"]
        entry = doc[gen.choice(keys)]
        field = gen.choice(["dtype", "shape", "data_offsets", "extra"])
        entry[field] = gen.choice(
            [None, -1, 2**70, "F32", "X9", [1, 2, 3], [-4, 2], [True], [0, 1e30], {"a": 1}, "", [5, 3], [0, 10**9]]
        )
        header = bytearray(json.dumps(doc).encode())
    elif kind == 6:  # truncate the data section
        data = data[: gen.randrange(len(data) + 1)]
    else:  # replace the whole header with a random JSON value
        header = bytearray(json.dumps(gen.choice([[], 1, "s", None, {"x": 1}, {"__metadata__": []}])).encode())
    return struct.pack("<Q", len(header)) + bytes(header) + data


def test_criterion_06_round_trip_and_fuzz(tmp_path):
    with criterion(6, "byte-exact round trip on all dtypes; 10,000 mutated headers fail cleanly", 30):
        gen = np.random.default_rng(6)
        m = {
            "f64": gen.standard_normal((3, 2)),
            "f32": gen.standard_normal(5).astype(np.float32),
            "f16": gen.standard_normal((2, 2)).astype(np.float16),
            "bf16": gen.standard_normal(4).astype(ml_dtypes.bfloat16),
            "u8": gen.integers(0, 256, 6).astype(np.uint8),
            "i64": gen.integers(-(2**63), 2**63 - 1, 3, dtype=np.int64),
            "nan_inf": np.array([np.nan, np.inf, -np.inf, -0.0], np.float32),
            "empty": np.zeros((0, 3), np.float64),
        }
        path = tmp_path / "all.safetensors"
        save_map(m, path)
        with open_lazy(path) as cp:
            back = load_all(cp)
        assert list(back) == sorted(m)
        for k, v in m.items():
            assert back[k].dtype == v.dtype and back[k].shape == v.shape
            assert back[k].tobytes() == v.tobytes(), k

        blob = path.read_bytes()
        target = tmp_path / "mutant.safetensors"
        rnd = random.Random(6)
        structured = opened = 0
        for _ in range(10_000):
            target.write_bytes(_mutate(blob, rnd))
            try:
                with open_lazy(target) as cp:
                    load_all(cp)
                opened += 1
            except CheckpointIOError:
                structured += 1
        assert structured + opened == 10_000
        assert structured > 5_000


def test_criterion_07_end_to_end(tmp_path, capsys):
    with criterion(7, "synth seed 7 + task_arithmetic 0.3: accuracy > 0.5, matches scalar reference, reproducible", 20):
        fx = tmp_path / "fx"
        assert main(["synth", "--seed", "7", "--out", str(fx)]) == 0
        blobs = []
        for i in range(2):
            code = main(
                [
                    "merge",
                    "--config",
                    str(fx / "config.yaml"),
                    "method.algorithm=task_arithmetic",
                    "method.scaling=0.3",
                    f"merged_model_save_path={tmp_path}/merged{i}.safetensors",
                    f"report_save_path={tmp_path}/report{i}.json",
                ]
            )
            assert code == 0
            blobs.append((tmp_path / f"merged{i}.safetensors").read_bytes())
        assert blobs[0] == blobs[1]

        report = json.loads((tmp_path / "report0.json").read_text())
        assert set(report["tasks"]) == {"task_a", "task_b"}

        # independent evaluation: struct-parsed files, scalar-loop forward pass
        ckpt = read_safetensors(tmp_path / "merged0.safetensors")
        layers = []
        for i in range(2):
            (out_dim, in_dim), w = ckpt[f"layers.{i}.weight"]
            _, b = ckpt[f"layers.{i}.bias"]
            layers.append(([w[r * in_dim : (r + 1) * in_dim] for r in range(out_dim)], b))
        for task in ("task_a", "task_b"):
            data = read_safetensors(fx / f"{task}.safetensors")
            (rows, cols), feats = data["features"]
            _, labels = data["labels"]
            feats = [feats[r * cols : (r + 1) * cols] for r in range(rows)]
            ref = count_accuracy(forward_logits(layers, feats), labels)
            assert abs(report["tasks"][task] - ref) <= 1e-6, (task, report["tasks"][task], ref)
            assert report["tasks"][task] > 0.5, (task, report["tasks"][task])
        assert abs(report["average"] - sum(report["tasks"].values()) / 2) <= 1e-9


def test_criterion_08_cosine_matrix(tmp_path):
    with criterion(8, "cosine matrix symmetric with unit diagonal; random task vectors near-orthogonal", 5):
        fx = tmp_path / "fx"
        assert main(["synth", "--seed", "7", "--out", str(fx)]) == 0
        pool = ModelPool(
            {"expert_a": CheckpointRef(fx / "expert_a.safetensors"), "expert_b": CheckpointRef(fx / "expert_b.safetensors")},
            base=CheckpointRef(fx / "base.safetensors"),
        )
        names, mat = task_vector_cosine_matrix(pool)
        assert names == ["expert_a", "expert_b"]
        assert np.array_equal(mat, mat.T)
        assert np.all(np.abs(np.diag(mat) - 1) <= 1e-6)

        gen = np.random.default_rng(8)
        base = {"w": gen.standard_normal(10_000)}
        models = {f"m{i}": {"w": base["w"] + gen.standard_normal(10_000)} for i in range(4)}
        _, mat = task_vector_cosine_matrix(ModelPool(models, base=base))
        assert np.array_equal(mat, mat.T)
        assert np.all(np.abs(np.diag(mat) - 1) <= 1e-6)
        assert np.all(np.abs(mat[~np.eye(4, dtype=bool)]) <= 0.05), mat


def test_criterion_09_ensembles():
    with criterion(9, "ensemble rows are distributions; identical inputs; max-model tie rule", 5):
        gen = np.random.default_rng(9)
        for _ in range(200):
            n, rows, cols = int(gen.integers(1, 5)), int(gen.integers(1, 8)), int(gen.integers(1, 6))
            preds = [PredictionMatrix(f"p{i}", gen.standard_normal((rows, cols)) * gen.uniform(0.1, 50)) for i in range(n)]
            for out in (simple_ensemble(preds), weighted_ensemble(preds, gen.uniform(0.1, 2, n)), max_model_predictor(preds)):
                assert np.all(out.scores >= 0)
                assert np.all(np.abs(out.scores.sum(axis=1) - 1) <= 1e-6)
            same = [PredictionMatrix(f"s{i}", preds[0].scores) for i in range(n)]
            single = softmax(preds[0].scores)
            for out in (simple_ensemble(same), weighted_ensemble(same, gen.uniform(0.1, 2, n)), max_model_predictor(same)):
                assert np.all(np.abs(out.scores - single) <= 1e-12)

        tie = max_model_predictor(
            [PredictionMatrix("a", [[3.0, 1.0, 0.0]]), PredictionMatrix("b", [[0.0, 1.0, 3.0]])]
        )
        assert np.array_equal(tie.scores, softmax(np.array([[3.0, 1.0, 0.0]])))


class _CountingFile:
    def __init__(self, fh):
        self._fh = fh
        self.bytes_read = 0

    def read(self, n=-1):
        chunk = self._fh.read(n)
        self.bytes_read += len(chunk)
        return chunk

    def __getattr__(self, name):
        return getattr(self._fh, name)


def test_criterion_10_lazy_loading(tmp_path):
    with criterion(10, "opening a >=100 MB checkpoint reads < header + 4096 bytes", 10):
        path = tmp_path / "big.safetensors"
        per_tensor = 4 * 1024 * 1024  # float32 elements, 16 MiB each
        big = {f"block.{i:02d}": np.full(per_tensor, float(i), np.float32) for i in range(7)}
        save_map(big, path)
        del big
        assert path.stat().st_size >= 100 * 1024 * 1024

        with open(path, "rb") as fh:
            (n,) = struct.unpack("<Q", fh.read(8))
        header_size = 8 + n

        handles = []

        def opener(p, mode):
            handles.append(_CountingFile(open(p, mode)))
            return handles[-1]

        with open_lazy(path, opener=opener) as cp:
            before = sum(h.bytes_read for h in handles)
            assert before < header_size + 4096, before
            t = cp.load_tensor("block.03")
            assert t.shape == (per_tensor,) and t[0] == 3.0 and t[-1] == 3.0
