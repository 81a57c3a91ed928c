"""Location decoder and multi-head spatial-context attention decoder."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .neural_core import LEAKY_SLOPE, Dense, ParameterStore, sigmoid

OUTPUT_ACTIVATIONS = ("sigmoid", "tanh", "identity")


class LocationDecoder:
    """Single linear map from a location embedding to a predicted feature embedding."""

    def __init__(self, store: ParameterStore, loc_dim: int, feat_dim: int, name: str = "loc_dec"):
        self.dense = Dense(store, name, loc_dim, feat_dim, "identity")

    def forward(self, loc_emb: np.ndarray) -> np.ndarray:
        if loc_emb.ndim != 2 or loc_emb.shape[1] != self.dense.in_dim:
            raise ShapeError(f"location decoder expects [B, {self.dense.in_dim}], got {loc_emb.shape}")
        return self.dense.forward(loc_emb)

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return self.dense.backward(grad)


def _g(name, z):
    if name == "sigmoid":
        return sigmoid(z)
    if name == "tanh":
        return np.tanh(z)
    return z


def _g_grad(name, y, dy):
    if name == "sigmoid":
        return dy * y * (1.0 - y)
    if name == "tanh":
        return dy * (1.0 - y * y)
    return dy


def _softmax_neighbors(s):
    """Softmax over the neighbor axis (1) of ``[B, n, K]`` scores."""
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class _AttentionLayer:
    """One score-vector attention layer over n neighbors with K heads.

    ``a`` has shape [K, q + dv + dx] where q is the query width (0 for the
    initial layer). Scores are ``leaky_relu(a_k . [query; v_j; x_j])``; the
    output is ``(1/K) sum_k sum_j alpha_jk v_j`` before the activation.
    """

    def __init__(self, store, name, heads, query_dim, feat_dim, disp_dim):
        self.q, self.dv, self.dx = query_dim, feat_dim, disp_dim
        self.heads = heads
        self.a = store.add(name, (heads, query_dim + feat_dim + disp_dim), "weight")

    def forward(self, query, V, X):
        a = self.a.value
        q, dv = self.q, self.dv
        z = np.einsum("bnd,kd->bnk", V, a[:, q:q + dv])
        if self.dx:
            z = z + np.einsum("bnd,kd->bnk", X, a[:, q + dv:])
        if q:
            z = z + (query @ a[:, :q].T)[:, None, :]
        s = np.where(z > 0, z, LEAKY_SLOPE * z)
        alpha = _softmax_neighbors(s)
        pre = np.einsum("bnk,bnd->bd", alpha, V) / self.heads
        self._cache = (query, V, X, z, alpha)
        return pre, alpha

    def backward(self, dpre):
        query, V, X, z, alpha = self._cache
        a = self.a.value
        q, dv = self.q, self.dv
        K = self.heads
        # d pre / d alpha_jk = v_j / K, identical across heads.
        dalpha = (V @ dpre[:, :, None]) / K                                # [B, n, 1]
        dV = alpha.sum(axis=2, keepdims=True) / K * dpre[:, None, :]     # [B, n, dv]
        ds = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
        dz = ds * np.where(z > 0, 1.0, LEAKY_SLOPE)                        # [B, n, K]
        ga = np.zeros_like(a)
        ga[:, q:q + dv] = np.einsum("bnk,bnd->kd", dz, V)
        dV = dV + np.einsum("bnk,kd->bnd", dz, a[:, q:q + dv])
        dX = None
        if self.dx:
            ga[:, q + dv:] = np.einsum("bnk,bnd->kd", dz, X)
            dX = np.einsum("bnk,kd->bnd", dz, a[:, q + dv:])
        dquery = None
        if q:
            dzs = dz.sum(axis=1)                                           # [B, K]
            ga[:, :q] = dzs.T @ query
            dquery = dzs @ a[:, :q]
        self.a.grad += ga
        return dquery, dV, dX


class ContextDecoder:
    """Predicts a center's feature embedding from its n neighbors.

    An initial attention layer (scores from neighbor features and displacement
    embeddings) gives a first guess ``e_init``; a second layer re-scores the
    neighbors with ``e_init`` as query. ``disp_dim = 0`` drops the displacement
    term from both layers.
    """

    def __init__(self, store: ParameterStore, feat_dim: int, disp_dim: int, heads: int = 4,
                 activation: str = "sigmoid", name: str = "ctx_dec"):
        if heads < 1:
            raise ConfigError(f"need at least one attention head, got {heads}")
        if activation not in OUTPUT_ACTIVATIONS:
            raise ConfigError(f"context decoder activation must be one of {OUTPUT_ACTIVATIONS}")
        self.feat_dim, self.disp_dim = feat_dim, disp_dim
        self.heads = heads
        self.activation = activation
        self.init_layer = _AttentionLayer(store, f"{name}.a_init", heads, 0, feat_dim, disp_dim)
        self.main_layer = _AttentionLayer(store, f"{name}.a_main", heads, feat_dim, feat_dim, disp_dim)
        self._cache = None
        self.init_alpha = self.main_alpha = None

    def _check(self, V, X):
        if V.ndim != 3 or V.shape[2] != self.feat_dim:
            raise ShapeError(f"neighbor features must be [B, n, {self.feat_dim}], got {V.shape}")
        if self.disp_dim:
            if X is None or X.shape != V.shape[:2] + (self.disp_dim,):
                raise ShapeError(f"displacement embeddings must be {V.shape[:2] + (self.disp_dim,)}")
        if V.shape[1] < 1:
            raise ShapeError("context needs at least one neighbor")

    def init_embedding(self, V, X=None) -> np.ndarray:
        self._check(V, X)
        pre, self.init_alpha = self.init_layer.forward(None, V, X)
        return _g(self.activation, pre)

    def decode(self, e_init, V, X=None) -> np.ndarray:
        self._check(V, X)
        pre, self.main_alpha = self.main_layer.forward(e_init, V, X)
        return _g(self.activation, pre)

    def forward(self, V: np.ndarray, X: np.ndarray | None = None) -> np.ndarray:
        """``V``: [B, n, dv] neighbor features; ``X``: [B, n, dx] displacement embeddings."""
        e_init = self.init_embedding(V, X)
        out = self.decode(e_init, V, X)
        self._cache = (e_init, out)
        return out

    __call__ = forward

    def backward(self, grad: np.ndarray):
        """Returns (dV, dX); dX is None without displacement embeddings."""
        if self._cache is None:
            raise RuntimeError("context decoder: backward called before forward")
        e_init, out = self._cache
        dpre2 = _g_grad(self.activation, out, grad)
        de_init, dV, dX = self.main_layer.backward(dpre2)
        dpre1 = _g_grad(self.activation, e_init, de_init)
        _, dV1, dX1 = self.init_layer.backward(dpre1)
        dV = dV + dV1
        if dX is not None:
            dX = dX + dX1
        return dV, dX
