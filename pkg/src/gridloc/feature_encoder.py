"""Point feature encoder: mean of a point's type embeddings."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DataError
from .neural_core import ParameterStore, l2_normalize_rows

TYPE_TABLE = "feature.type_emb"


def membership_matrix(type_sets: Sequence[Sequence[int]], vocab_size: int) -> sp.csr_matrix:
    """Row i holds 1/H_i at each of point i's H_i types."""
    rows, cols, vals = [], [], []
    for i, ts in enumerate(type_sets):
        if len(ts) == 0:
            raise DataError(f"point row {i} has an empty type set")
        w = 1.0 / len(ts)
        for t in ts:
            if not 0 <= t < vocab_size:
                raise DataError(f"type id {t} outside vocabulary of size {vocab_size}")
            rows.append(i)
            cols.append(t)
            vals.append(w)
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(type_sets), vocab_size))


class FeatureEncoder:
    """Holds the type embedding table and pools it per point.

    Batched use goes through a membership matrix so every point's pooled
    embedding costs one sparse product, and its gradient one transposed product.
    """

    def __init__(self, store: ParameterStore, vocab_size: int, dim: int):
        self.vocab_size, self.dim = vocab_size, dim
        self.table = store.add(TYPE_TABLE, (vocab_size, dim), "embedding")

    def encode(self, type_ids: Sequence[int]) -> np.ndarray:
        if len(type_ids) == 0:
            raise DataError("cannot encode an empty type set")
        return self.forward(membership_matrix([type_ids], self.vocab_size))[0]

    def forward(self, members: sp.csr_matrix) -> np.ndarray:
        return np.asarray(members @ self.table.value)

    def backward(self, members: sp.csr_matrix, grad: np.ndarray):
        self.table.grad += np.asarray(members.T @ grad)

    def normalize(self):
        """Project every row back onto the unit sphere (zero rows stay put)."""
        self.table.value[...] = l2_normalize_rows(self.table.value)


def apply_type_matrix_normalization(store: ParameterStore):
    p = store[TYPE_TABLE]
    p.value[...] = l2_normalize_rows(p.value)
