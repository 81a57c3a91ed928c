"""Losses, negative sampling and the training loop shared by both task setups."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DataError, TrainingDivergence
from .models import PointTable
from .neural_core import adam_step, derive_rng, log_sigmoid, sigmoid
from .poi_data import Dataset, SplitAssignment

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    num_negatives: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.num_negatives < 1:
            raise ConfigError("num_negatives must be at least 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_nll: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# Losses


def full_softmax_loss(pred: np.ndarray, candidates: np.ndarray, true_index: int) -> float:
    """-log softmax of the true candidate's inner product with ``pred``."""
    scores = np.asarray(candidates) @ np.asarray(pred)
    return float(logsumexp(scores) - scores[true_index])


def mean_nll(pred: np.ndarray, candidates: np.ndarray, true_rows: np.ndarray) -> float:
    scores = pred @ candidates.T
    nll = logsumexp(scores, axis=1) - scores[np.arange(len(true_rows)), true_rows]
    return float(nll.mean())


def neg_sampling_loss(target: np.ndarray, pred: np.ndarray, negatives: np.ndarray) -> float:
    """-[log s(t.p) + mean_o log s(-o.p)] for one example."""
    negatives = np.atleast_2d(negatives)
    if len(negatives) < 1:
        raise ValueError("need at least one negative")
    pos = log_sigmoid(target @ pred)
    neg = log_sigmoid(-(negatives @ pred)).mean()
    return float(-(pos + neg))


def neg_sampling_loss_grad(target, pred, negatives):
    """Batch-mean negative-sampling loss and its gradients.

    ``target``: [B, d], ``pred``: [B, d], ``negatives``: [B, Q, d].
    Returns ``(loss, d_pred, d_target, d_negatives)``.
    """
    B, Q = negatives.shape[:2]
    s_pos = np.einsum("bd,bd->b", target, pred)
    s_neg = np.einsum("bqd,bd->bq", negatives, pred)
    loss = -(log_sigmoid(s_pos) + log_sigmoid(-s_neg).mean(axis=1))
    # d/ds log s(s) = 1 - s(s); d/ds log s(-s) = -s(s)
    g_pos = -(1.0 - sigmoid(s_pos)) / B              # [B]
    g_neg = sigmoid(s_neg) / (Q * B)                 # [B, Q]
    d_pred = g_pos[:, None] * target + np.einsum("bq,bqd->bd", g_neg, negatives)
    d_target = g_pos[:, None] * pred
    d_neg = g_neg[:, :, None] * pred[:, None, :]
    return float(loss.mean()), d_pred, d_target, d_neg


# --------------------------------------------------------------------------
# Negatives


def sample_negative_rows(num_points: int, true_row: int, count: int,
                         rng: np.random.Generator) -> np.ndarray:
    """``count`` distinct rows drawn uniformly from range(num_points) minus ``true_row``."""
    if count >= num_points:
        raise DataError(f"cannot draw {count} negatives from {num_points} points")
    picks = rng.choice(num_points - 1, count, replace=False)
    return picks + (picks >= true_row)


def sample_negatives(ds: Dataset, true_id: int, count: int, rng: np.random.Generator) -> list[int]:
    rows = sample_negative_rows(len(ds), ds.index_of[true_id], count, rng)
    return [int(i) for i in ds.ids[rows]]


# --------------------------------------------------------------------------
# Loop


@dataclass
class TrainResult:
    history: History
    best_params: dict


def _eval_nll(model, data: PointTable, rows: np.ndarray) -> float:
    model.eval()
    pred = model.predict_all(data, rows)
    return mean_nll(pred, model.feature_embeddings(data), rows)


def train_step(model, data: PointTable, batch: np.ndarray, negs: np.ndarray,
               cfg: TrainConfig) -> float:
    """One forward/backward/Adam/renormalize step; returns the batch loss."""
    store, features = model.store, model.features
    store.zero_grads()
    B, Q = negs.shape
    pred = model.predict(data, batch)
    all_rows = np.concatenate([batch, negs.ravel()])
    members = data.members[all_rows]
    emb = features.forward(members)
    loss, d_pred, d_t, d_n = neg_sampling_loss_grad(emb[:B], pred, emb[B:].reshape(B, Q, -1))
    if math.isfinite(loss):
        model.backward(d_pred)
        features.backward(members, np.concatenate([d_t, d_n.reshape(B * Q, -1)]))
        adam_step(store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        features.normalize()
    return loss


def train(model, ds: Dataset | PointTable, split: SplitAssignment, cfg: TrainConfig,
          on_epoch=None) -> TrainResult:
    """Mini-batch negative-sampling training with model selection on validation NLL.

    The model's parameters are left at the best epoch's values.
    """
    data = ds if isinstance(ds, PointTable) else PointTable(ds)
    P = len(data)
    if cfg.num_negatives >= P:
        raise ConfigError(f"num_negatives={cfg.num_negatives} must be below the dataset size {P}")
    train_rows = data.ds.indices(split.train)
    val_rows = data.ds.indices(split.val)
    if len(train_rows) == 0:
        raise DataError("training split is empty")
    shuffle_rng = derive_rng(cfg.seed, "shuffle")
    neg_rng = derive_rng(cfg.seed, "train-negatives")
    hist = History()
    best, best_score = model.store.snapshot(), math.inf
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = shuffle_rng.permutation(train_rows)
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[start:start + cfg.batch_size]
            negs = np.stack([sample_negative_rows(P, r, cfg.num_negatives, neg_rng) for r in batch])
            loss = train_step(model, data, batch, negs, cfg)
            if not math.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss {loss} at epoch {epoch}, batch {b}")
            losses.append(loss * len(batch))
        hist.train_loss.append(float(sum(losses) / len(order)))
        score = _eval_nll(model, data, val_rows) if len(val_rows) else hist.train_loss[-1]
        hist.val_nll.append(score if len(val_rows) else math.nan)
        if score < best_score:
            best_score, hist.best_epoch = score, epoch
            best = model.store.snapshot()
        log.debug("epoch %d loss %.6f val_nll %.6f", epoch, hist.train_loss[-1], score)
        if on_epoch is not None:
            on_epoch(epoch, hist)
    model.store.restore(best)
    model.eval()
    return TrainResult(hist, best)
