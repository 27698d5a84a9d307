import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import f1_score

from tabcl.data import Task
from tabcl.ndcore import forward
from tabcl.predictor import (EvalResult, HeadConfig, evaluate, f1, load_head, predict, rmse,
                             save_head, train_head, train_mlp)

BINARY = Task("classification", 2)


def _separable(rng, n=200):
    y = np.repeat([0, 1], n // 2)
    x = rng.normal(size=(n, 5))
    x[:, 0] = np.where(y == 1, 1.0, -1.0) * rng.uniform(0.5, 2.0, size=n)
    return x, y


class TestHead:
    def test_separable_reaches_perfect_training_accuracy(self, rng):
        x, y = _separable(rng)
        head = train_head(x, y, BINARY, HeadConfig(epochs=200))
        assert np.mean(predict(head, x) == y) == 1.0

    def test_zero_epochs_is_random_init(self, rng):
        x, y = _separable(rng)
        head = train_head(x, y, BINARY, HeadConfig(epochs=0, seed=4))
        fresh = train_head(x, y, BINARY, HeadConfig(epochs=0, seed=4))
        np.testing.assert_array_equal(head.net.weights[0], fresh.net.weights[0])
        assert np.all(head.net.biases[0] == 0)

    def test_deterministic(self, rng):
        x, y = _separable(rng)
        a = train_head(x, y, BINARY, HeadConfig(epochs=5))
        b = train_head(x, y, BINARY, HeadConfig(epochs=5))
        for p, q in zip(a.net.params(), b.net.params()):
            np.testing.assert_array_equal(p, q)

    def test_predict_matches_manual_composition(self, rng):
        x, y = _separable(rng)
        head = train_head(x, y, BINARY, HeadConfig(epochs=3))
        manual = (x @ head.net.weights[0].T + head.net.biases[0]).argmax(axis=1)
        np.testing.assert_array_equal(predict(head, x), manual)
        assert set(np.unique(predict(head, x))) <= {0, 1}

    def test_regression_head(self, rng):
        x = rng.normal(size=(300, 3))
        y = 100.0 + 20.0 * (x @ np.array([1.0, -2.0, 0.5]))
        head = train_head(x, y, Task("regression"), HeadConfig(epochs=200))
        assert rmse(predict(head, x), y) < 1.0

    def test_single_class_rejected(self, rng):
        with pytest.raises(ValueError):
            train_head(rng.normal(size=(10, 2)), np.zeros(10, dtype=int), BINARY)

    def test_mlp_baseline_learns_xor(self, rng):
        x = rng.uniform(-1, 1, size=(600, 2))
        y = ((x[:, 0] > 0) ^ (x[:, 1] > 0)).astype(int)
        mlp = train_mlp(x, y, BINARY, hidden=32, cfg=HeadConfig(epochs=100, lr=1e-2))
        assert np.mean(predict(mlp, x) == y) > 0.9
        assert len(mlp.net.weights) == 3

    def test_save_load(self, tmp_path, rng):
        x = rng.normal(size=(50, 3))
        head = train_head(x, x[:, 0] * 3 + 1, Task("regression"), HeadConfig(epochs=2))
        save_head(tmp_path / "h.npz", head)
        back = load_head(tmp_path / "h.npz")
        assert (back.target_mean, back.target_std, back.task) == (head.target_mean, head.target_std, head.task)
        np.testing.assert_array_equal(predict(back, x), predict(head, x))


class TestF1:
    def test_perfect(self):
        assert f1([0, 1, 1, 0], [0, 1, 1, 0]) == 1.0

    def test_all_wrong_binary(self):
        assert f1([1, 0, 1], [0, 1, 0]) == 0.0

    def test_hand_confusion(self):
        # TP=2, FP=1, FN=1
        assert f1([1, 1, 1, 0, 0], [1, 1, 0, 1, 0]) == pytest.approx(2 / 3)

    @settings(max_examples=200)
    @given(st.integers(2, 5), st.integers(0, 2 ** 31))
    def test_matches_sklearn(self, k, seed):
        r = np.random.default_rng(seed)
        labels, preds = r.integers(0, k, 40), r.integers(0, k, 40)
        expect = f1_score(labels, preds, average="binary" if k == 2 else "macro",
                          labels=None if k == 2 else np.union1d(labels, preds), zero_division=0)
        assert f1(preds, labels, k) == pytest.approx(expect, abs=1e-12)

    def test_relabeling_invariance(self, rng):
        labels, preds = rng.integers(0, 4, 60), rng.integers(0, 4, 60)
        perm = rng.permutation(4)
        assert f1(perm[preds], perm[labels], 4) == pytest.approx(f1(preds, labels, 4))

    def test_empty(self):
        with pytest.raises(ValueError):
            f1([], [])


class TestRmse:
    def test_zero(self):
        assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_hand_value(self):
        assert rmse([0, 0], [3, 4]) == pytest.approx(np.sqrt(12.5))

    @settings(max_examples=100)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(-1e3, 1e3))
    def test_symmetry_and_translation(self, a, c):
        a = np.array(a)
        b = a[::-1] * 0.5
        assert rmse(a, b) == rmse(b, a)
        assert rmse(a + c, b + c) == pytest.approx(rmse(a, b), abs=1e-9)


class TestEvaluate:
    def test_classification_result(self, rng):
        x, y = _separable(rng)
        head = train_head(x, y, BINARY, HeadConfig(epochs=100))
        res = evaluate(head, x, y, "in", "M^a")
        assert (res.metric, res.n, res.split, res.model) == ("F1", len(y), "in", "M^a")
        assert res.value == f1(predict(head, x), y, 2)

    def test_range_validation(self):
        with pytest.raises(ValueError):
            EvalResult("F1", 1.5, 3, "in", "M^a")
        with pytest.raises(ValueError):
            EvalResult("RMSE", -0.1, 3, "in", "M^a")

    def test_wrong_width(self, rng):
        x, y = _separable(rng)
        head = train_head(x, y, BINARY, HeadConfig(epochs=1))
        with pytest.raises(Exception):
            predict(head, x[:, :3])
        assert forward(head.net, x)[0].shape == (len(x), 2)
