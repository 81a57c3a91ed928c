import json
import math

import numpy as np
import pytest

from gridloc.errors import ConfigError, DataError, ShapeError
from gridloc.neural_core import (
    Dense, Dropout, Embedding, ParameterStore, adam_step, block_diag_mask, derive_rng,
    derive_seed, grad_check, l2_normalize_rows, load_checkpoint_into, log_sigmoid,
    read_checkpoint, save_checkpoint, sigmoid,
)


def _scalar_adam(w, grads, lr, b1, b2, eps):
    """Textbook Adam on one scalar, step by step."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        w = w - lr * mhat / (math.sqrt(vhat) + eps)
    return w


def _numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + h
        fp = f()
        x.flat[i] = old - h
        fm = f()
        x.flat[i] = old
        g.flat[i] = (fp - fm) / (2 * h)
    return g


class TestSeeds:
    def test_stable_and_purpose_keyed(self):
        assert derive_seed(1, "split") == derive_seed(1, "split")
        assert derive_seed(1, "split") != derive_seed(1, "train")
        assert derive_seed(1, "split") != derive_seed(2, "split")
        assert 0 <= derive_seed(2 ** 64 - 1, "x") < 2 ** 63

    def test_rng_streams(self):
        a = derive_rng(5, "a").random(4)
        np.testing.assert_array_equal(a, derive_rng(5, "a").random(4))


class TestNumerics:
    def test_sigmoid_extremes(self):
        z = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
        s = sigmoid(z)
        assert np.all(np.isfinite(s))
        np.testing.assert_allclose(s + sigmoid(-z), 1.0, atol=1e-15)
        assert s[2] == 0.5

    def test_log_sigmoid(self):
        z = np.linspace(-50, 50, 101)
        oracle = [-math.log1p(math.exp(-v)) if v >= 0 else v - math.log1p(math.exp(v)) for v in z]
        np.testing.assert_allclose(log_sigmoid(z), oracle, rtol=1e-12)
        assert np.isfinite(log_sigmoid(np.array([-1000.0]))[0])

    def test_l2_rows(self):
        t = np.array([[3.0, 4.0], [0.0, 0.0]])
        np.testing.assert_allclose(l2_normalize_rows(t), [[0.6, 0.8], [0.0, 0.0]])

    def test_block_mask(self):
        m = block_diag_mask(2, 3, 1)
        np.testing.assert_array_equal(m, [[1, 0]] * 3 + [[0, 1]] * 3)


class TestDense:
    @pytest.mark.parametrize("act", ["relu", "leaky_relu", "sigmoid", "tanh", "identity"])
    def test_backward_matches_finite_differences(self, act):
        store = ParameterStore()
        layer = Dense(store, "d", 4, 3, act)
        store.init_params(0)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(5, 4))
        dy = rng.normal(size=(5, 3))

        def loss():
            return float((layer.forward(x) * dy).sum())

        loss()
        store.zero_grads()
        dx = layer.backward(dy)
        np.testing.assert_allclose(layer.W.grad, _numeric_grad(loss, layer.W.value), atol=1e-7)
        np.testing.assert_allclose(layer.b.grad, _numeric_grad(loss, layer.b.value), atol=1e-7)
        np.testing.assert_allclose(dx, _numeric_grad(loss, x), atol=1e-7)

    def test_batched_leading_axes(self):
        store = ParameterStore()
        layer = Dense(store, "d", 2, 3)
        store.init_params(0)
        x = np.ones((4, 5, 2))
        assert layer.forward(x).shape == (4, 5, 3)
        assert layer.backward(np.ones((4, 5, 3))).shape == (4, 5, 2)
        np.testing.assert_allclose(layer.b.grad, 20.0)

    def test_shape_errors(self):
        store = ParameterStore()
        layer = Dense(store, "d", 2, 3)
        with pytest.raises(ShapeError):
            layer.forward(np.ones((1, 4)))
        with pytest.raises(RuntimeError):
            Dense(store, "e", 2, 2).backward(np.ones((1, 2)))

    def test_unknown_activation(self):
        with pytest.raises(ConfigError):
            Dense(ParameterStore(), "d", 2, 2, "gelu")

    def test_block_diagonal_indivisible(self):
        with pytest.raises(ConfigError):
            Dense(ParameterStore(), "d", 6, 5, num_blocks=2)

    def test_block_diagonal_stays_masked(self):
        store = ParameterStore()
        layer = Dense(store, "d", 6, 4, num_blocks=2)
        store.init_params(3)
        off = layer.W.mask == 0
        assert np.all(layer.W.value[off] == 0)
        rng = np.random.default_rng(0)
        for _ in range(5):
            store.zero_grads()
            layer.forward(rng.normal(size=(8, 6)))
            layer.backward(rng.normal(size=(8, 4)))
            adam_step(store, lr=0.1)
        assert np.all(layer.W.value[off] == 0)
        assert np.all(layer.W.value[~off] != 0)

    def test_duplicate_parameter_name(self):
        store = ParameterStore()
        Dense(store, "d", 2, 2)
        with pytest.raises((ValueError, ConfigError)):
            Dense(store, "d", 2, 2)


class TestEmbeddingDropout:
    def test_scatter_add_repeated_ids(self):
        store = ParameterStore()
        emb = Embedding(store, "e", 4, 2)
        emb.forward(np.array([[1, 1], [3, 1]]))
        emb.backward(np.ones((2, 2, 2)))
        np.testing.assert_array_equal(emb.table.grad[:, 0], [0, 3, 0, 1])

    def test_out_of_range(self):
        emb = Embedding(ParameterStore(), "e", 4, 2)
        with pytest.raises(DataError):
            emb.forward([4])

    def test_dropout_inverted_scaling(self):
        d = Dropout(0.5, np.random.default_rng(0))
        x = np.ones((20000,))
        assert d.forward(x) is x
        d.training = True
        y = d.forward(x)
        assert set(np.unique(y)) <= {0.0, 2.0}
        assert abs(y.mean() - 1.0) < 0.05
        np.testing.assert_array_equal(d.backward(x), y)

    @pytest.mark.parametrize("rate", [-0.1, 1.0])
    def test_dropout_rate(self, rate):
        with pytest.raises(ConfigError):
            Dropout(rate, np.random.default_rng(0))


class TestInit:
    def test_glorot_bounds_and_zero_bias(self):
        store = ParameterStore()
        layer = Dense(store, "d", 300, 200)
        emb = Embedding(store, "e", 2000, 64)
        store.init_params(1)
        lim = math.sqrt(6 / 500)
        assert np.abs(layer.W.value).max() <= lim
        assert abs(layer.W.value.std() - lim / math.sqrt(3)) < 0.01 * lim
        assert np.all(layer.b.value == 0)
        assert abs(emb.table.value.std() - 1 / 8) < 0.005

    def test_order_independent(self):
        a, b = ParameterStore(), ParameterStore()
        Dense(a, "x", 3, 3)
        Dense(a, "y", 3, 3)
        Dense(b, "y", 3, 3)
        Dense(b, "x", 3, 3)
        a.init_params(4)
        b.init_params(4)
        for name in a.names():
            np.testing.assert_array_equal(a[name].value, b[name].value)


class TestAdam:
    def test_matches_scalar_oracle(self):
        store = ParameterStore()
        p = store.add("w", (3,), "weight")
        p.value[:] = [0.5, -1.0, 2.0]
        start = p.value.copy()
        grads = np.random.default_rng(0).normal(size=(25, 3))
        for g in grads:
            p.grad[:] = g
            adam_step(store, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8)
        for i in range(3):
            assert p.value[i] == pytest.approx(_scalar_adam(start[i], grads[:, i], 0.01, 0.9, 0.999, 1e-8),
                                               rel=1e-12, abs=1e-14)
        assert store.step_count == 25

    def test_first_step_size_is_lr(self):
        store = ParameterStore()
        p = store.add("w", (4,), "weight")
        p.grad[:] = [1e-3, -5.0, 7.0, 100.0]
        adam_step(store, lr=0.1, eps=0.0)
        np.testing.assert_allclose(p.value, [-0.1, 0.1, -0.1, -0.1], rtol=1e-12)

    def test_explicit_step_index(self):
        store = ParameterStore()
        store.add("w", (1,), "weight")
        with pytest.raises(ValueError):
            adam_step(store, t=0)


class TestGradCheck:
    def _quadratic(self, broken=False):
        store = ParameterStore()
        layer = Dense(store, "d", 3, 2, "tanh")
        store.init_params(2)
        x = np.random.default_rng(0).normal(size=(4, 3))

        def f():
            store.zero_grads()
            y = layer.forward(x)
            layer.backward(2 * y)
            if broken:
                layer.W.grad *= 1.01
            return float((y ** 2).sum())
        return store, f

    def test_correct_gradients_pass(self):
        store, f = self._quadratic()
        rep = grad_check(f, store, num_coords=16)
        assert rep.num_checked >= 16
        assert rep.ok(1e-6)

    def test_detects_wrong_gradient(self):
        store, f = self._quadratic(broken=True)
        rep = grad_check(f, store, num_coords=16)
        assert not rep.ok(1e-4)
        assert rep.worst[0] == "d.W"

    def test_restores_values(self):
        store, f = self._quadratic()
        before = store.snapshot()
        grad_check(f, store, num_coords=8)
        for k, v in before.items():
            np.testing.assert_array_equal(store[k].value, v)


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        store = ParameterStore()
        Dense(store, "d", 5, 3)
        Embedding(store, "e", 7, 4)
        store.init_params(9)
        store["d.b"].value[:] = [1e-300, -np.pi, 1 / 3]
        save_checkpoint(store, tmp_path / "c.json", {"note": "x"})
        other = ParameterStore()
        Dense(other, "d", 5, 3)
        Embedding(other, "e", 7, 4)
        header = load_checkpoint_into(other, tmp_path / "c.json")
        assert header == {"note": "x"}
        for name in store.names():
            np.testing.assert_array_equal(other[name].value, store[name].value)

    def test_shape_mismatch(self, tmp_path):
        store = ParameterStore()
        Dense(store, "d", 5, 3)
        save_checkpoint(store, tmp_path / "c.json")
        other = ParameterStore()
        Dense(other, "d", 5, 4)
        with pytest.raises(ShapeError):
            load_checkpoint_into(other, tmp_path / "c.json")

    def test_missing_parameter(self, tmp_path):
        store = ParameterStore()
        Dense(store, "d", 2, 2)
        save_checkpoint(store, tmp_path / "c.json")
        other = ParameterStore()
        Dense(other, "d", 2, 2)
        Dense(other, "z", 2, 2)
        with pytest.raises(DataError, match="lacks"):
            load_checkpoint_into(other, tmp_path / "c.json")

    def test_rejects_foreign_file(self, tmp_path):
        (tmp_path / "x.json").write_text(json.dumps({"format": "other"}))
        with pytest.raises(DataError):
            read_checkpoint(tmp_path / "x.json")
        (tmp_path / "y.json").write_text("{not json")
        with pytest.raises(DataError):
            read_checkpoint(tmp_path / "y.json")
