import math

import numpy as np
import pytest

from gridloc.decoders import ContextDecoder, LocationDecoder
from gridloc.errors import ConfigError, ShapeError
from gridloc.neural_core import ParameterStore, grad_check


def _decoder(dv=6, dx=5, K=4, act="sigmoid", seed=0):
    store = ParameterStore()
    dec = ContextDecoder(store, dv, dx, K, act)
    store.init_params(seed)
    # Widen the attention weights so the softmax is far from uniform.
    for p in store:
        p.value *= 3.0
    return store, dec


def _loop_forward(dec, V, X):
    """Per-example, per-head, per-neighbor re-derivation of the two attention layers."""
    g = {"sigmoid": lambda z: 1 / (1 + math.exp(-z)), "tanh": math.tanh,
         "identity": lambda z: z}[dec.activation]
    a0 = dec.init_layer.a.value
    a1 = dec.main_layer.a.value
    K = dec.heads
    out = []
    for b in range(V.shape[0]):
        def layer(a, query):
            acc = np.zeros(V.shape[2])
            for k in range(K):
                scores = []
                for j in range(V.shape[1]):
                    parts = ([] if query is None else [query]) + [V[b, j]]
                    if X is not None:
                        parts.append(X[b, j])
                    z = float(a[k] @ np.concatenate(parts))
                    scores.append(z if z > 0 else 0.2 * z)
                w = np.exp(np.array(scores) - max(scores))
                w /= w.sum()
                for j in range(V.shape[1]):
                    acc += w[j] * V[b, j]
            return np.array([g(v) for v in acc / K])
        e0 = layer(a0, None)
        out.append(layer(a1, e0))
    return np.array(out)


class TestLocationDecoder:
    def test_linear_map(self):
        store = ParameterStore()
        dec = LocationDecoder(store, 4, 3)
        store.init_params(0)
        x = np.random.default_rng(0).normal(size=(5, 4))
        np.testing.assert_allclose(dec(x), x @ dec.dense.W.value + dec.dense.b.value)

    def test_shape_check(self):
        dec = LocationDecoder(ParameterStore(), 4, 3)
        with pytest.raises(ShapeError):
            dec(np.zeros((2, 3)))


class TestContextDecoder:
    @pytest.mark.parametrize("act", ["sigmoid", "tanh", "identity"])
    def test_matches_loop_oracle(self, act):
        _, dec = _decoder(act=act)
        rng = np.random.default_rng(1)
        V, X = rng.normal(size=(3, 7, 6)), rng.normal(size=(3, 7, 5))
        np.testing.assert_allclose(dec(V, X), _loop_forward(dec, V, X), atol=1e-12)

    def test_without_displacements(self):
        store = ParameterStore()
        dec = ContextDecoder(store, 6, 0, 2)
        store.init_params(0)
        V = np.random.default_rng(2).normal(size=(2, 4, 6))
        np.testing.assert_allclose(dec(V), _loop_forward(dec, V, None), atol=1e-12)
        assert store["ctx_dec.a_init"].shape == (2, 6)
        assert store["ctx_dec.a_main"].shape == (2, 12)

    def test_parameter_shapes(self):
        store, _ = _decoder(dv=6, dx=5, K=4)
        assert store["ctx_dec.a_init"].shape == (4, 11)
        assert store["ctx_dec.a_main"].shape == (4, 17)

    def test_attention_normalized(self):
        _, dec = _decoder()
        rng = np.random.default_rng(3)
        dec(rng.normal(size=(10, 9, 6)), rng.normal(size=(10, 9, 5)))
        for alpha in (dec.init_alpha, dec.main_alpha):
            assert alpha.shape == (10, 9, 4)
            np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-12)

    def test_permutation_invariant(self):
        _, dec = _decoder()
        rng = np.random.default_rng(4)
        V, X = rng.normal(size=(5, 10, 6)), rng.normal(size=(5, 10, 5))
        base = dec(V, X)
        for _ in range(5):
            perm = rng.permutation(10)
            assert np.abs(dec(V[:, perm], X[:, perm]) - base).max() <= 1e-12

    def test_gradients(self):
        store, dec = _decoder()
        rng = np.random.default_rng(5)
        V, X = rng.normal(size=(4, 6, 6)), rng.normal(size=(4, 6, 5))
        w = rng.normal(size=(4, 6))

        def f():
            store.zero_grads()
            y = dec(V, X)
            dec.backward(w)
            return float((y * w).sum())

        assert grad_check(f, store, num_coords=64).ok(1e-6)

    def test_input_gradients(self):
        _, dec = _decoder(act="tanh")
        rng = np.random.default_rng(6)
        V, X = rng.normal(size=(2, 3, 6)), rng.normal(size=(2, 3, 5))
        w = rng.normal(size=(2, 6))
        dec(V, X)
        dV, dX = dec.backward(w)
        h = 1e-6
        for arr, grad in ((V, dV), (X, dX)):
            for idx in [(0, 0, 0), (1, 2, 3), (0, 1, 4)]:
                old = arr[idx]
                arr[idx] = old + h
                fp = float((dec(V, X) * w).sum())
                arr[idx] = old - h
                fm = float((dec(V, X) * w).sum())
                arr[idx] = old
                assert grad[idx] == pytest.approx((fp - fm) / (2 * h), rel=1e-6, abs=1e-9)

    def test_single_neighbor_copies_activation(self):
        _, dec = _decoder(act="identity")
        V = np.random.default_rng(7).normal(size=(2, 1, 6))
        np.testing.assert_allclose(dec(V, np.zeros((2, 1, 5))), V[:, 0], atol=1e-14)

    def test_shape_errors(self):
        _, dec = _decoder()
        with pytest.raises(ShapeError):
            dec(np.zeros((2, 3, 6)), None)
        with pytest.raises(ShapeError):
            dec(np.zeros((2, 3, 4)), np.zeros((2, 3, 5)))
        with pytest.raises(ShapeError):
            dec(np.zeros((2, 0, 6)), np.zeros((2, 0, 5)))

    def test_config_errors(self):
        with pytest.raises(ConfigError):
            ContextDecoder(ParameterStore(), 4, 2, 0)
        with pytest.raises(ConfigError):
            ContextDecoder(ParameterStore(), 4, 2, 1, "relu")
