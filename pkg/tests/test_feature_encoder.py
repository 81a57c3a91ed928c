import numpy as np
import pytest

from gridloc.errors import DataError
from gridloc.feature_encoder import (
    TYPE_TABLE, FeatureEncoder, apply_type_matrix_normalization, membership_matrix,
)
from gridloc.neural_core import ParameterStore


@pytest.fixture
def enc():
    store = ParameterStore()
    e = FeatureEncoder(store, 5, 8)
    store.init_params(0)
    return e


class TestMembership:
    def test_weights(self):
        M = membership_matrix([(0,), (1, 3), (4, 2, 0)], 5).toarray()
        np.testing.assert_allclose(M.sum(axis=1), 1.0)
        np.testing.assert_allclose(M[1], [0, 0.5, 0, 0.5, 0])
        np.testing.assert_allclose(M[2, [0, 2, 4]], 1 / 3)

    def test_errors(self):
        with pytest.raises(DataError):
            membership_matrix([()], 3)
        with pytest.raises(DataError):
            membership_matrix([(3,)], 3)


class TestFeatureEncoder:
    def test_mean_of_type_embeddings(self, enc):
        T = enc.table.value
        np.testing.assert_allclose(enc.encode([1, 4]), (T[1] + T[4]) / 2)
        np.testing.assert_allclose(enc.encode([2]), T[2])

    def test_empty_set(self, enc):
        with pytest.raises(DataError):
            enc.encode([])

    def test_batch_forward_and_backward(self, enc):
        sets = [(0,), (1, 2), (2, 3, 4)]
        M = membership_matrix(sets, 5)
        out = enc.forward(M)
        for i, ts in enumerate(sets):
            np.testing.assert_allclose(out[i], enc.table.value[list(ts)].mean(axis=0))
        g = np.random.default_rng(0).normal(size=out.shape)
        enc.backward(M, g)
        expect = np.zeros((5, 8))
        for i, ts in enumerate(sets):
            for t in ts:
                expect[t] += g[i] / len(ts)
        np.testing.assert_allclose(enc.table.grad, expect)

    def test_normalize_rows(self, enc):
        enc.table.value[3] = 0.0
        enc.normalize()
        norms = np.linalg.norm(enc.table.value, axis=1)
        np.testing.assert_allclose(norms[[0, 1, 2, 4]], 1.0)
        assert norms[3] == 0.0

    def test_store_level_normalization(self):
        store = ParameterStore()
        FeatureEncoder(store, 3, 4)
        store.init_params(1)
        apply_type_matrix_normalization(store)
        np.testing.assert_allclose(np.linalg.norm(store[TYPE_TABLE].value, axis=1), 1.0)
