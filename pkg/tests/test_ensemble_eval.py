import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fusionkit.errors import (
    EmptyEnsemble,
    LengthMismatch,
    MalformedArchitecture,
    ShapeMismatch,
    ValidationError,
)
from fusionkit.ensemble_eval import (
    EvalReport,
    LabeledDataset,
    PredictionMatrix,
    accuracy,
    evaluate,
    load_dataset,
    load_predictions,
    max_model_predictor,
    mlp_forward,
    save_dataset,
    save_predictions,
    simple_ensemble,
    softmax,
    weighted_ensemble,
)
from oracles import count_accuracy, forward_logits, softmax_row

finite = st.floats(-50, 50, allow_nan=False)


def pm(name, rows):
    return PredictionMatrix(name, np.array(rows, dtype=np.float64))


def net(rng, widths):
    m = {}
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        m[f"layers.{i}.weight"] = rng.standard_normal((b, a))
        m[f"layers.{i}.bias"] = rng.standard_normal(b)
    return m


class TestSimpleEnsemble:
    def test_identical_inputs_give_softmax(self, rng):
        s = rng.standard_normal((5, 3))
        out = simple_ensemble([pm("a", s), pm("b", s), pm("c", s)])
        np.testing.assert_allclose(out.scores, softmax(s), rtol=1e-12)

    def test_saturated_opposites(self):
        out = simple_ensemble([pm("a", [[20.0, -20.0]]), pm("b", [[-20.0, 20.0]])])
        np.testing.assert_allclose(out.scores, [[0.5, 0.5]], atol=1e-12)

    def test_against_scalar_loop(self, rng):
        mats = [rng.standard_normal((6, 4)) * 3 for _ in range(3)]
        out = simple_ensemble([pm(str(i), m) for i, m in enumerate(mats)])
        for r in range(6):
            rows = [softmax_row(m[r].tolist()) for m in mats]
            want = [sum(p[c] for p in rows) / 3 for c in range(4)]
            np.testing.assert_allclose(out.scores[r], want, rtol=1e-6)

    def test_large_logits_do_not_overflow(self):
        out = simple_ensemble([pm("a", [[1e308, 0.0], [-1e308, 1e308]])])
        assert np.all(np.isfinite(out.scores))
        np.testing.assert_allclose(out.scores.sum(axis=1), 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            simple_ensemble([pm("a", [[1, 2]]), pm("b", [[1, 2, 3]])])

    def test_empty(self):
        with pytest.raises(EmptyEnsemble):
            simple_ensemble([])

    @given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_rows_are_distributions(self, n, rows, cols, seed):
        rng = np.random.default_rng(seed)
        preds = [pm(str(i), rng.standard_normal((rows, cols)) * 30) for i in range(n)]
        for fn in (simple_ensemble, max_model_predictor):
            out = fn(preds).scores
            assert np.all(out >= 0)
            np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)

    @given(st.integers(0, 2**32 - 1))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        preds = [pm(str(i), rng.standard_normal((4, 3))) for i in range(3)]
        a = simple_ensemble(preds).scores
        b = simple_ensemble(preds[::-1]).scores
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)

    @given(arrays(np.float64, (3, 4), elements=finite), st.lists(finite, min_size=3, max_size=3))
    def test_shift_invariant(self, scores, shifts):
        shifted = scores + np.array(shifts)[:, None]
        np.testing.assert_allclose(softmax(shifted), softmax(scores), atol=1e-6)
        np.testing.assert_allclose(
            simple_ensemble([pm("a", shifted), pm("b", scores)]).scores,
            simple_ensemble([pm("a", scores), pm("b", scores)]).scores,
            atol=1e-6,
        )


class TestWeightedEnsemble:
    def test_uniform_is_simple(self, rng):
        preds = [pm(str(i), rng.standard_normal((4, 3))) for i in range(3)]
        np.testing.assert_array_equal(weighted_ensemble(preds, [2, 2, 2]).scores, simple_ensemble(preds).scores)

    def test_selects_first(self, rng):
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        np.testing.assert_allclose(weighted_ensemble([pm("a", a), pm("b", b)], [1, 0]).scores, softmax(a))

    def test_hand_computed(self):
        # probabilities [0.8, 0.2] and [0.4, 0.6] given as log-probabilities
        a, b = np.log([[0.8, 0.2]]), np.log([[0.4, 0.6]])
        out = weighted_ensemble([pm("a", a), pm("b", b)], [3, 1])
        np.testing.assert_allclose(out.scores, [[0.75 * 0.8 + 0.25 * 0.4, 0.75 * 0.2 + 0.25 * 0.6]], rtol=1e-12)
        np.testing.assert_allclose(out.scores, [[0.7, 0.3]], rtol=1e-12)

    def test_bad_weights(self):
        from fusionkit.errors import NegativeWeight, ZeroWeightSum

        preds = [pm("a", [[0.0, 1.0]]), pm("b", [[1.0, 0.0]])]
        with pytest.raises(NegativeWeight):
            weighted_ensemble(preds, [1, -1])
        with pytest.raises(ZeroWeightSum):
            weighted_ensemble(preds, [0, 0])
        with pytest.raises(LengthMismatch):
            weighted_ensemble(preds, [1])


class TestMaxModel:
    def test_single_model(self, rng):
        s = rng.standard_normal((4, 3))
        np.testing.assert_allclose(max_model_predictor([pm("a", s)]).scores, softmax(s))

    def test_more_confident_wins(self):
        out = max_model_predictor([pm("a", np.log([[0.6, 0.4]])), pm("b", np.log([[0.9, 0.1]]))])
        np.testing.assert_allclose(out.scores, [[0.9, 0.1]])
        out = max_model_predictor([pm("a", np.log([[0.9, 0.1]])), pm("b", np.log([[0.6, 0.4]]))])
        np.testing.assert_allclose(out.scores, [[0.9, 0.1]])

    def test_tie_picks_first_model(self):
        # same confidence, different rows
        out = max_model_predictor([pm("a", [[2.0, 0.0, 1.0]]), pm("b", [[0.0, 2.0, 1.0]])])
        np.testing.assert_array_equal(out.scores, softmax(np.array([[2.0, 0.0, 1.0]])))

    def test_per_sample_selection(self, rng):
        mats = [rng.standard_normal((10, 3)) * 2 for _ in range(3)]
        out = max_model_predictor([pm(str(i), m) for i, m in enumerate(mats)]).scores
        for r in range(10):
            rows = [softmax_row(m[r].tolist()) for m in mats]
            best = 0
            for i in range(1, 3):
                if max(rows[i]) > max(rows[best]):
                    best = i
            np.testing.assert_allclose(out[r], rows[best], rtol=1e-12)


class TestMlp:
    def test_identity_layer(self, rng):
        x = rng.standard_normal((5, 3))
        out = mlp_forward({"layers.0.weight": np.eye(3), "layers.0.bias": np.zeros(3)}, x)
        np.testing.assert_array_equal(out.scores, x)

    def test_hand_example(self):
        out = mlp_forward({"layers.0.weight": np.array([[1.0, -1.0]]), "layers.0.bias": np.array([0.5])}, np.array([[2.0, 1.0]]))
        assert out.scores.tolist() == [[1.5]]

    def test_two_layers_against_scalar_loop(self, rng):
        m = net(rng, [5, 7, 3])
        x = rng.standard_normal((9, 5))
        want = forward_logits(
            [(m[f"layers.{i}.weight"].tolist(), m[f"layers.{i}.bias"].tolist()) for i in range(2)], x.tolist()
        )
        np.testing.assert_allclose(mlp_forward(m, x).scores, want, rtol=1e-5)

    def test_float32_weights(self, rng):
        m = {k: v.astype(np.float32) for k, v in net(rng, [4, 6, 2]).items()}
        x = rng.standard_normal((3, 4)).astype(np.float32)
        want = forward_logits(
            [(m[f"layers.{i}.weight"].tolist(), m[f"layers.{i}.bias"].tolist()) for i in range(2)], x.tolist()
        )
        np.testing.assert_allclose(mlp_forward(m, x).scores, want, rtol=1e-9)

    def test_batch_order_equivariant(self, rng):
        m = net(rng, [4, 8, 3])
        x = rng.standard_normal((12, 4))
        perm = rng.permutation(12)
        np.testing.assert_array_equal(mlp_forward(m, x[perm]).scores, mlp_forward(m, x).scores[perm])

    @pytest.mark.parametrize(
        "mutate",
        [
            lambda m: (m.pop("layers.1.weight"), m.pop("layers.1.bias")),  # gap before layer 2
            lambda m: m.__setitem__("layers.1.weight", np.zeros((3, 5))),  # width mismatch
            lambda m: m.__setitem__("layers.0.weight", np.zeros(4)),  # not 2-D
            lambda m: m.pop("layers.0.bias"),
            lambda m: m.__setitem__("head.weight", np.zeros((1, 1))),
            lambda m: m.__setitem__("layers.01.weight", np.zeros((1, 1))),
        ],
    )
    def test_malformed(self, rng, mutate):
        m = net(rng, [4, 6, 5, 3])
        mutate(m)
        with pytest.raises(MalformedArchitecture):
            mlp_forward(m, rng.standard_normal((2, 4)))

    def test_feature_width(self, rng):
        with pytest.raises(MalformedArchitecture):
            mlp_forward(net(rng, [4, 3]), rng.standard_normal((2, 5)))


class TestAccuracy:
    def test_all_correct(self):
        assert accuracy(np.eye(4), [0, 1, 2, 3]) == 1.0

    def test_half(self):
        assert accuracy(np.array([[1.0, 0.0], [2.0, 1.0]]), [0, 1]) == 0.5

    def test_ties_pick_lowest(self):
        assert accuracy(np.array([[1.0, 1.0], [0.5, 0.5]]), [0, 1]) == 0.5

    def test_against_counting_oracle(self, rng):
        scores = rng.integers(0, 3, (200, 4)).astype(float)  # plenty of ties
        labels = rng.integers(0, 4, 200)
        assert accuracy(scores, labels) == count_accuracy(scores.tolist(), labels.tolist())

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            accuracy(np.eye(3), [0, 1])

    @given(st.integers(1, 30), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_in_unit_interval(self, n, c, seed):
        rng = np.random.default_rng(seed)
        acc = accuracy(rng.standard_normal((n, c)), rng.integers(0, c, n))
        assert 0.0 <= acc <= 1.0


class TestEvaluate:
    def test_perfect_model(self):
        model = {"layers.0.weight": np.eye(3), "layers.0.bias": np.zeros(3)}
        report = evaluate(model, [("t", LabeledDataset(np.eye(3), [0, 1, 2]))])
        assert report.tasks == {"t": 1.0}
        assert report.average == 1.0

    def test_average_is_mean(self):
        report = EvalReport({"a": 0.8, "b": 0.6})
        assert abs(report.average - 0.7) <= 1e-9
        d = report.to_dict()
        assert d["average"] == report.average
        assert list(d) == sorted(d)

    def test_json_schema(self):
        report = EvalReport({"b": 0.5, "a": 1.0}, algorithm="simple_average", spec={"weights": (1.0, 2.0)})
        d = json.loads(report.to_json())
        assert set(d) == {"algorithm", "average", "spec", "tasks", "timestamp", "version"}
        assert list(d["tasks"]) == ["a", "b"]
        assert d["spec"] == {"weights": [1.0, 2.0]}
        assert "Avg." in report.format_table()

    def test_against_scalar_loop(self, rng):
        m = net(rng, [3, 5, 4])
        tasks = []
        for name in ("x", "y"):
            tasks.append((name, LabeledDataset(rng.standard_normal((40, 3)), rng.integers(0, 4, 40), 4)))
        report = evaluate(m, tasks)
        layers = [(m[f"layers.{i}.weight"].tolist(), m[f"layers.{i}.bias"].tolist()) for i in range(2)]
        for name, ds in tasks:
            want = count_accuracy(forward_logits(layers, ds.features.tolist()), ds.labels.tolist())
            assert abs(report.tasks[name] - want) <= 1e-12

    def test_label_out_of_range(self):
        model = {"layers.0.weight": np.eye(2), "layers.0.bias": np.zeros(2)}
        with pytest.raises(ValidationError):
            evaluate(model, [("t", LabeledDataset(np.eye(2), [0, 5]))])

    def test_no_tasks(self):
        with pytest.raises(ValidationError):
            evaluate({"layers.0.weight": np.eye(2), "layers.0.bias": np.zeros(2)}, [])


class TestContainers:
    def test_dataset_round_trip(self, tmp_path, rng):
        ds = LabeledDataset(rng.standard_normal((6, 2)).astype(np.float32), rng.integers(0, 3, 6))
        save_dataset(ds, tmp_path / "d.safetensors")
        back = load_dataset(tmp_path / "d.safetensors")
        np.testing.assert_array_equal(back.features, ds.features)
        assert back.labels.dtype == np.int64
        np.testing.assert_array_equal(back.labels, ds.labels)

    def test_predictions_round_trip(self, tmp_path, rng):
        p = pm("m", rng.standard_normal((3, 2)))
        save_predictions(p, tmp_path / "p.safetensors")
        back = load_predictions(tmp_path / "p.safetensors")
        assert back.name == "p"
        np.testing.assert_array_equal(back.scores, p.scores)

    def test_dataset_validation(self):
        with pytest.raises(LengthMismatch):
            LabeledDataset(np.zeros((3, 2)), [0, 1])
        with pytest.raises(ValidationError):
            LabeledDataset(np.zeros((2, 2)), [0, 3], n_classes=3)
        with pytest.raises(ValidationError):
            LabeledDataset(np.zeros((2, 2)), [0, -1])

    def test_missing_keys(self, tmp_path):
        from fusionkit.checkpoint_io import save_map

        save_map({"x": np.zeros(1)}, tmp_path / "x.safetensors")
        with pytest.raises(ValidationError):
            load_dataset(tmp_path / "x.safetensors")
        with pytest.raises(ValidationError):
            load_predictions(tmp_path / "x.safetensors")
