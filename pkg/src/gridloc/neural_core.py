"""A small float64 layer library with hand-written backward passes.

Layers cache what they need during ``forward`` and *accumulate* parameter
gradients during ``backward``; call ``ParameterStore.zero_grads`` between steps.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, DataError, ShapeError

CHECKPOINT_FORMAT = "gridloc-checkpoint"
CHECKPOINT_VERSION = 1

LEAKY_SLOPE = 0.2


def derive_seed(seed: int, *purpose) -> int:
    """Stable 63-bit seed for a (root seed, purpose...) key."""
    key = ":".join([str(int(seed))] + [str(p) for p in purpose]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


def derive_rng(seed: int, *purpose) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *purpose))


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    kind: str  # "weight", "bias" or "embedding"
    mask: np.ndarray | None = None
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    scratch: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.scratch = np.empty_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size


class ParameterStore:
    """Named trainable arrays with gradient and Adam moment buffers."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self.step_count = 0

    def add(self, name: str, shape, kind: str = "weight", mask=None) -> Parameter:
        if name in self._params:
            raise ConfigError(f"parameter {name!r} already registered")
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"parameter {name!r}: dimensions must be positive, got {shape}")
        if mask is not None:
            mask = np.asarray(mask, dtype=np.float64)
            if mask.shape != shape:
                raise ShapeError(f"mask shape {mask.shape} does not match {shape}")
        p = Parameter(name, np.zeros(shape), kind, mask)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def num_values(self) -> int:
        return sum(p.size for p in self)

    def zero_grads(self):
        for p in self:
            p.grad[...] = 0.0

    def init_params(self, seed: int):
        """Glorot-uniform weights, zero biases, N(0, 1/sqrt(D)) embedding rows.

        Each parameter draws from its own name-keyed stream, so registration
        order does not matter.
        """
        for p in self:
            rng = derive_rng(seed, "init", p.name)
            if p.kind == "bias":
                p.value[...] = 0.0
            elif p.kind == "embedding":
                D = p.shape[-1]
                p.value[...] = rng.normal(0.0, 1.0 / math.sqrt(D), p.shape)
            else:
                if p.mask is not None:
                    fan_in = int(p.mask[:, 0].sum()) or p.shape[0]
                    fan_out = int(p.mask[0].sum()) or p.shape[1]
                else:
                    fan_in = p.shape[0]
                    fan_out = p.shape[1] if len(p.shape) > 1 else p.shape[0]
                lim = math.sqrt(6.0 / (fan_in + fan_out))
                p.value[...] = rng.uniform(-lim, lim, p.shape)
            if p.mask is not None:
                p.value *= p.mask
            p.m[...] = 0.0
            p.v[...] = 0.0
        self.step_count = 0

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self}

    def restore(self, values: dict[str, np.ndarray]):
        for name, val in values.items():
            p = self._params[name]
            if p.shape != val.shape:
                raise ShapeError(f"{name}: stored shape {val.shape} != {p.shape}")
            p.value[...] = val


def adam_step(store: ParameterStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, t=None):
    """Bias-corrected Adam on every parameter. ``t`` defaults to the store's step counter."""
    if t is None:
        store.step_count += 1
        t = store.step_count
    if t < 1:
        raise ValueError(f"Adam step index must be >= 1, got {t}")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in store:
        # In-place arithmetic on a per-parameter scratch buffer; large
        # embedding tables make temporaries the dominant cost.
        buf = p.scratch
        g = p.grad
        if p.mask is not None:
            g = np.multiply(p.grad, p.mask, out=buf)
            p.m *= beta1
            p.m += (1.0 - beta1) * g
            p.v *= beta2
            p.v += (1.0 - beta2) * g * g
        else:
            p.m *= beta1
            np.multiply(g, 1.0 - beta1, out=buf)
            p.m += buf
            p.v *= beta2
            np.multiply(g, g, out=buf)
            buf *= 1.0 - beta2
            p.v += buf
        np.divide(p.v, c2, out=buf)
        np.sqrt(buf, out=buf)
        buf += eps
        np.divide(p.m, buf, out=buf)
        buf *= lr / c1
        p.value -= buf
        if p.mask is not None:
            p.value *= p.mask


# --------------------------------------------------------------------------
# Activations


def _act_forward(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if name == "sigmoid":
        return sigmoid(z)
    if name == "tanh":
        return np.tanh(z)
    if name == "identity":
        return z
    raise ConfigError(f"unknown activation {name!r}")


def _act_backward(name, z, y, dy):
    if name == "relu":
        return dy * (z > 0)
    if name == "leaky_relu":
        return dy * np.where(z > 0, 1.0, LEAKY_SLOPE)
    if name == "sigmoid":
        return dy * y * (1.0 - y)
    if name == "tanh":
        return dy * (1.0 - y * y)
    return dy


ACTIVATIONS = ("relu", "leaky_relu", "sigmoid", "tanh", "identity")


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_sigmoid(z):
    return -np.logaddexp(0.0, -np.asarray(z, dtype=np.float64))


# --------------------------------------------------------------------------
# Layers


def block_diag_mask(num_blocks: int, block_in: int, block_out: int) -> np.ndarray:
    mask = np.zeros((num_blocks * block_in, num_blocks * block_out))
    for s in range(num_blocks):
        mask[s * block_in:(s + 1) * block_in, s * block_out:(s + 1) * block_out] = 1.0
    return mask


class Dense:
    """``act(x @ W + b)`` over the last axis; optional block-diagonal weight."""

    def __init__(self, store: ParameterStore, name: str, in_dim: int, out_dim: int,
                 activation: str = "identity", num_blocks: int | None = None):
        if in_dim <= 0 or out_dim <= 0:
            raise ShapeError(f"{name}: dims must be positive, got {in_dim}->{out_dim}")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"{name}: unknown activation {activation!r}")
        mask = None
        if num_blocks is not None:
            if in_dim % num_blocks or out_dim % num_blocks:
                raise ConfigError(
                    f"{name}: block-diagonal layer {in_dim}->{out_dim} not divisible "
                    f"into {num_blocks} blocks")
            mask = block_diag_mask(num_blocks, in_dim // num_blocks, out_dim // num_blocks)
        self.name = name
        self.in_dim, self.out_dim = in_dim, out_dim
        self.activation = activation
        self.W = store.add(f"{name}.W", (in_dim, out_dim), "weight", mask=mask)
        self.b = store.add(f"{name}.b", (out_dim,), "bias")
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"{self.name}: expected input dim {self.in_dim}, got {x.shape}")
        z = x @ self.W.value + self.b.value
        y = _act_forward(self.activation, z)
        self._cache = (x, z, y)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        x, z, y = self._cache
        if dy.shape != y.shape:
            raise ShapeError(f"{self.name}: upstream grad {dy.shape} != output {y.shape}")
        dz = _act_backward(self.activation, z, y, dy)
        x2 = x.reshape(-1, self.in_dim)
        dz2 = dz.reshape(-1, self.out_dim)
        gW = x2.T @ dz2
        if self.W.mask is not None:
            gW *= self.W.mask
        self.W.grad += gW
        self.b.grad += dz2.sum(axis=0)
        return dz @ self.W.value.T


class Embedding:
    """Row lookup; backward scatter-adds into the table gradient."""

    def __init__(self, store: ParameterStore, name: str, rows: int, dim: int):
        self.name = name
        self.rows, self.dim = rows, dim
        self.table = store.add(f"{name}.table", (rows, dim), "embedding")
        self._ids = None

    def forward(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.rows):
            raise DataError(f"{self.name}: id out of range [0, {self.rows})")
        self._ids = ids
        return self.table.value[ids]

    def backward(self, dy: np.ndarray):
        if self._ids is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        np.add.at(self.table.grad, self._ids.ravel(), dy.reshape(-1, self.dim))


class Dropout:
    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng
        self.training = False
        self._mask = None

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            self._mask = None
            return x
        self._mask = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


def l2_normalize_rows(t: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Unit-norm rows; rows with norm below ``eps`` are returned unchanged."""
    t = np.asarray(t, dtype=np.float64)
    norms = np.linalg.norm(t, axis=-1, keepdims=True)
    return np.where(norms < eps, t, t / np.maximum(norms, eps))


# --------------------------------------------------------------------------
# Gradient verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    num_checked: int
    worst: tuple[str, int] | None

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(loss_and_grad: Callable[[], float], store: ParameterStore,
               num_coords: int = 64, seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_and_grad`` must zero the store's gradients, run forward and backward,
    and return the scalar loss. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    loss_and_grad()
    analytic = {p.name: p.grad.copy() for p in store}
    rng = np.random.default_rng(seed)
    params = [p for p in store if p.size]
    free = {}
    for p in params:
        idx = np.arange(p.size)
        # Masked-out coordinates are structurally zero; skip them.
        free[p.name] = idx if p.mask is None else idx[p.mask.ravel() > 0]
    picks: list[tuple[Parameter, int]] = []
    per = max(1, math.ceil(num_coords / len(params)))
    for p in params:
        candidates = free[p.name]
        nz = candidates[analytic[p.name].ravel()[candidates] != 0]
        want = min(per, len(candidates))
        # Favour coordinates the loss actually touches.
        take_nz = min(len(nz), (want + 1) // 2 if len(nz) < len(candidates) else want)
        chosen = list(rng.choice(nz, take_nz, replace=False)) if take_nz else []
        rest = np.setdiff1d(candidates, chosen)
        if want - take_nz > 0 and len(rest):
            chosen += list(rng.choice(rest, min(want - take_nz, len(rest)), replace=False))
        picks += [(p, int(i)) for i in chosen]
    while len(picks) < num_coords:
        p = params[rng.integers(len(params))]
        picks.append((p, int(rng.choice(free[p.name]))))
    worst_err, worst = 0.0, None
    for p, i in picks:
        flat = p.value.reshape(-1)
        w0 = flat[i]
        h = 1e-5 * max(1.0, abs(w0))
        flat[i] = w0 + h
        lp = loss_and_grad()
        flat[i] = w0 - h
        lm = loss_and_grad()
        flat[i] = w0
        num = (lp - lm) / (2 * h)
        a = analytic[p.name].reshape(-1)[i]
        err = abs(a - num) / max(abs(a), abs(num), floor)
        if err > worst_err:
            worst_err, worst = err, (p.name, i)
    loss_and_grad()
    return GradCheckReport(worst_err, len(picks), worst)


# --------------------------------------------------------------------------
# Checkpoints


def _fmt(values: np.ndarray) -> str:
    return " ".join(f"{v:.17g}" for v in values.reshape(-1))


def save_checkpoint(store: ParameterStore, path: str | Path, header: dict | None = None):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "header": header or {},
        "parameters": [
            {"name": p.name, "shape": list(p.shape), "values": _fmt(p.value)} for p in store
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    values = {}
    for entry in doc["parameters"]:
        shape = tuple(entry["shape"])
        arr = np.array([float(s) for s in entry["values"].split()], dtype=np.float64)
        if arr.size != math.prod(shape):
            raise DataError(f"{path}: parameter {entry['name']} has {arr.size} values for shape {shape}")
        values[entry["name"]] = arr.reshape(shape)
    return doc["header"], values


def load_checkpoint_into(store: ParameterStore, path: str | Path) -> dict:
    header, values = read_checkpoint(path)
    missing = set(store.names()) - set(values)
    if missing:
        raise DataError(f"{path}: checkpoint lacks parameters {sorted(missing)}")
    store.restore({k: v for k, v in values.items() if k in store})
    return header
