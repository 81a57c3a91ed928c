import math

import numpy as np
import pytest
from scipy.special import expit

from gridloc.encoder_assembly import EncoderConfig
from gridloc.errors import ConfigError, DataError, TrainingDivergence
from gridloc.models import ModelSpec, PointTable, build_model
from gridloc.poi_data import split_dataset
from gridloc.training import (
    TrainConfig, full_softmax_loss, mean_nll, neg_sampling_loss, neg_sampling_loss_grad,
    sample_negative_rows, sample_negatives, train, train_step,
)

from conftest import make_dataset


def _loc_model(ds, seed=0, kind="theory"):
    enc = EncoderConfig(kind, out_dim=8, hidden_dim=16, lambda_min=20.0, lambda_max=2000.0,
                        num_scales=4)
    return build_model(ModelSpec("loc", len(ds.vocab), 8, enc, seed=seed))


class TestLosses:
    def test_neg_sampling_scalar(self):
        t = np.array([1.0, 0.0])
        p = np.array([2.0, 1.0])
        negs = np.array([[0.0, 1.0], [-1.0, 0.0]])
        expect = -(math.log(expit(2.0)) + 0.5 * (math.log(expit(-1.0)) + math.log(expit(2.0))))
        assert neg_sampling_loss(t, p, negs) == pytest.approx(expect, rel=1e-14)

    def test_batch_grad_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        T, P, N = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 5, 4))
        loss, dP, dT, dN = neg_sampling_loss_grad(T, P, N)
        assert loss == pytest.approx(np.mean([neg_sampling_loss(T[b], P[b], N[b]) for b in range(3)]))
        h = 1e-6
        for arr, grad in ((P, dP), (T, dT), (N, dN)):
            for idx in [(0, 0), (2, 3)] if arr.ndim == 2 else [(0, 0, 0), (2, 4, 1)]:
                old = arr[idx]
                arr[idx] = old + h
                fp = neg_sampling_loss_grad(T, P, N)[0]
                arr[idx] = old - h
                fm = neg_sampling_loss_grad(T, P, N)[0]
                arr[idx] = old
                assert grad[idx] == pytest.approx((fp - fm) / (2 * h), rel=1e-6, abs=1e-10)

    def test_full_softmax(self):
        cands = np.eye(3)
        pred = np.array([1.0, 2.0, 3.0])
        expect = math.log(math.exp(1) + math.exp(2) + math.exp(3)) - 2.0
        assert full_softmax_loss(pred, cands, 1) == pytest.approx(expect, rel=1e-14)
        assert mean_nll(pred[None], cands, np.array([1])) == pytest.approx(expect, rel=1e-14)

    def test_full_softmax_large_scores_stable(self):
        assert math.isfinite(full_softmax_loss(np.array([1e4]), np.array([[1.0], [-1.0]]), 0))


class TestNegatives:
    def test_excludes_true_and_distinct(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            rows = sample_negative_rows(12, 5, 11, rng)
            assert sorted(rows.tolist()) == [i for i in range(12) if i != 5]

    def test_uniform(self):
        rng = np.random.default_rng(1)
        counts = np.bincount(np.concatenate([sample_negative_rows(6, 0, 1, rng)
                                             for _ in range(10000)]), minlength=6)
        assert counts[0] == 0
        assert np.all(np.abs(counts[1:] / 10000 - 0.2) < 0.02)

    def test_too_many(self):
        with pytest.raises(DataError):
            sample_negative_rows(5, 0, 5, np.random.default_rng(0))

    def test_by_id(self, small_ds):
        ids = sample_negatives(small_ds, 7, 10, np.random.default_rng(0))
        assert 7 not in ids and len(set(ids)) == 10


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(batch_size=0), dict(lr=0.0),
                                    dict(num_negatives=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


class TestTrainLoop:
    def test_loss_decreases_and_best_restored(self, small_ds):
        model = _loc_model(small_ds)
        split = split_dataset(small_ds, seed=0)
        res = train(model, small_ds, split, TrainConfig(epochs=15, num_negatives=5, seed=1))
        h = res.history
        assert len(h.train_loss) == 15 and len(h.val_nll) == 15
        assert h.train_loss[-1] < h.train_loss[0]
        assert h.val_nll[h.best_epoch - 1] == min(h.val_nll)
        for name, val in res.best_params.items():
            np.testing.assert_array_equal(model.store[name].value, val)

    def test_type_rows_unit_norm_after_steps(self, small_ds):
        model = _loc_model(small_ds)
        train(model, small_ds, split_dataset(small_ds), TrainConfig(epochs=2, num_negatives=3))
        np.testing.assert_allclose(np.linalg.norm(model.features.table.value, axis=1), 1.0)

    def test_bit_identical_histories(self, small_ds):
        split = split_dataset(small_ds, seed=2)
        runs = []
        for _ in range(2):
            model = _loc_model(small_ds, seed=3)
            runs.append(train(model, small_ds, split, TrainConfig(epochs=4, seed=4)).history)
        assert runs[0].train_loss == runs[1].train_loss
        assert runs[0].val_nll == runs[1].val_nll

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises(self, small_ds):
        model = _loc_model(small_ds)
        model.decoder.dense.W.value[0, 0] = np.inf
        with pytest.raises(TrainingDivergence, match="epoch 1, batch 0"):
            train(model, small_ds, split_dataset(small_ds), TrainConfig(epochs=1))

    def test_too_many_negatives(self, small_ds):
        with pytest.raises(ConfigError):
            train(_loc_model(small_ds), small_ds, split_dataset(small_ds),
                  TrainConfig(num_negatives=len(small_ds)))

    def test_context_model_step(self, small_ds):
        enc = EncoderConfig("polar", out_dim=8, hidden_dim=16)
        model = build_model(ModelSpec("cont", len(small_ds.vocab), 8, enc, context_size=4, seed=0))
        data = PointTable(small_ds)
        before = model.store.snapshot()
        rows = np.arange(8)
        negs = np.stack([sample_negative_rows(len(data), r, 3, np.random.default_rng(r)) for r in rows])
        loss = train_step(model, data, rows, negs, TrainConfig())
        assert math.isfinite(loss)
        changed = [n for n in before if not np.array_equal(before[n], model.store[n].value)]
        assert {"ctx_dec.a_init", "ctx_dec.a_main", "feature.type_emb"} <= set(changed)
        assert any(n.startswith("disp_enc") for n in changed)
