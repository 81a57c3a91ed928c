"""Cosine ranking of the true point against sampled negatives; NLL, MRR and HIT@k."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .models import PointTable
from .training import mean_nll, sample_negative_rows

CSV_FIELDS = ["model", "repeat", "num_negatives", "k", "nll", "mrr", "hit_at_k"]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(n == 0):
        raise DataError("cosine similarity is undefined for a zero-norm embedding")
    return x / n


def _cosines(pred: np.ndarray, cands: np.ndarray) -> np.ndarray:
    # Elementwise product + sum keeps identical candidates bitwise identical,
    # which the tie rule relies on.
    return (_unit_rows(pred)[..., None, :] * _unit_rows(cands)).sum(axis=-1)


def rank_candidates(pred, true_emb, negatives) -> int:
    """1-based rank of ``true_emb`` among ``[true_emb] + negatives`` by cosine to ``pred``.

    Negatives scoring equal to the true candidate are ranked ahead of it.
    """
    cands = np.vstack([np.atleast_2d(true_emb), np.atleast_2d(negatives)])
    sims = _cosines(np.asarray(pred, dtype=np.float64), cands)
    return int(1 + np.count_nonzero(sims[1:] >= sims[0]))


def batch_ranks(pred: np.ndarray, cands: np.ndarray) -> np.ndarray:
    """``pred`` [T, d]; ``cands`` [T, 1 + N, d] with the true candidate first."""
    sims = _cosines(pred, cands)
    return 1 + np.count_nonzero(sims[:, 1:] >= sims[:, :1], axis=1)


def mrr(ranks) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("mrr of an empty rank list")
    if np.any(ranks < 1):
        raise ValueError("ranks must be >= 1")
    return float(np.mean(1.0 / ranks))


def hit_at_k(ranks, k: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("hit@k of an empty rank list")
    if np.any(ranks < 1):
        raise ValueError("ranks must be >= 1")
    return float(np.mean(ranks <= k))


def expected_random_mrr(num_negatives: int) -> float:
    """E[1/rank] for a rank uniform on 1..N+1, i.e. H_{N+1} / (N+1)."""
    n = num_negatives + 1
    return float(sum(1.0 / i for i in range(1, n + 1)) / n)


def expected_random_hit(num_negatives: int, k: int) -> float:
    return min(k, num_negatives + 1) / (num_negatives + 1)


@dataclass
class RankingReport:
    model: str
    num_negatives: int
    k: int
    nll_runs: list[float | None] = field(default_factory=list)
    mrr_runs: list[float] = field(default_factory=list)
    hit_runs: list[float] = field(default_factory=list)

    @property
    def repeats(self) -> int:
        return len(self.mrr_runs)

    @staticmethod
    def _stat(values):
        vals = [v for v in values if v is not None]
        if not vals:
            return None
        arr = np.asarray(vals, dtype=np.float64)
        return float(arr.mean()), float(arr.std())

    @property
    def nll(self):
        return self._stat(self.nll_runs)

    @property
    def mrr(self):
        return self._stat(self.mrr_runs)

    @property
    def hit_at_k(self):
        return self._stat(self.hit_runs)

    def to_text(self) -> str:
        lines = [f"model={self.model}", f"num_negatives={self.num_negatives}",
                 f"k={self.k}", f"repeats={self.repeats}"]
        for key, stat in (("nll", self.nll), ("mrr", self.mrr), ("hit_at_k", self.hit_at_k)):
            if stat is None:
                lines += [f"{key}_mean=nan", f"{key}_std=nan"]
            else:
                lines += [f"{key}_mean={stat[0]:.17g}", f"{key}_std={stat[1]:.17g}"]
        return "\n".join(lines) + "\n"

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(CSV_FIELDS)
        for r, (nll, m, h) in enumerate(zip(self.nll_runs, self.mrr_runs, self.hit_runs)):
            w.writerow([self.model, r, self.num_negatives, self.k,
                        "nan" if nll is None else f"{nll:.17g}", f"{m:.17g}", f"{h:.17g}"])
        return buf.getvalue()


def _check_sizes(num_points, num_test, N):
    if num_test == 0:
        raise DataError("no test points to evaluate")
    if N >= num_points:
        raise DataError(f"num_negatives={N} must be below the dataset size {num_points}")


def evaluate_model(model, data, test_ids, num_negatives: int = 100, k: int = 5,
                   repeats: int = 10, seed: int = 0, name: str | None = None) -> RankingReport:
    """Rank every test point against fresh negatives in each repeat (seed + r)."""
    data = data if isinstance(data, PointTable) else PointTable(data)
    rows = data.ds.indices(test_ids)
    P = len(data)
    _check_sizes(P, len(rows), num_negatives)
    model.eval()
    pred = model.predict_all(data, rows)
    cand_emb = model.feature_embeddings(data)
    nll = mean_nll(pred, cand_emb, rows)
    report = RankingReport(name or getattr(model, "name", type(model).__name__), num_negatives, k)
    for r in range(repeats):
        rng = np.random.default_rng(seed + r)
        negs = np.stack([sample_negative_rows(P, t, num_negatives, rng) for t in rows])
        cands = cand_emb[np.concatenate([rows[:, None], negs], axis=1)]
        ranks = batch_ranks(pred, cands)
        report.nll_runs.append(nll)
        report.mrr_runs.append(mrr(ranks))
        report.hit_runs.append(hit_at_k(ranks, k))
    return report


class RandomRanker:
    """Baseline that shuffles the true point and its negatives into a random order."""

    name = "random"

    def ranks(self, num_test: int, num_negatives: int, rng: np.random.Generator) -> np.ndarray:
        order = np.argsort(rng.random((num_test, num_negatives + 1)), axis=1)
        # Candidate 0 is the true point; its rank is its position in the shuffle.
        return 1 + np.argmax(order == 0, axis=1)


def evaluate_random(num_points: int, num_test: int, num_negatives: int = 100, k: int = 5,
                    repeats: int = 10, seed: int = 0) -> RankingReport:
    _check_sizes(num_points, num_test, num_negatives)
    ranker = RandomRanker()
    report = RankingReport(ranker.name, num_negatives, k)
    for r in range(repeats):
        ranks = ranker.ranks(num_test, num_negatives, np.random.default_rng(seed + r))
        report.nll_runs.append(None)
        report.mrr_runs.append(mrr(ranks))
        report.hit_runs.append(hit_at_k(ranks, k))
    return report


def random_mrr_std(num_negatives: int) -> float:
    """Standard deviation of 1/rank for a uniformly random rank."""
    n = num_negatives + 1
    r = np.arange(1, n + 1, dtype=np.float64)
    return float(math.sqrt(np.mean(1.0 / r ** 2) - np.mean(1.0 / r) ** 2))
