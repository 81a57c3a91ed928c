"""Location encoders: a raw featurizer followed by a trainable head."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import space_encoders as se
from .errors import ConfigError
from .neural_core import Dense, Dropout, Embedding, ParameterStore, derive_rng

ENCODER_KINDS = (
    "direct", "tile", "wrap", "rbf", "scaled_rbf",
    "grid", "hexa", "theory", "theorydiag", "polar", "polar_tile",
)
SINUSOIDAL = ("grid", "hexa", "theory", "theorydiag")

# Fields each kind cannot do without.
_REQUIRED = {
    "direct": ("box",),
    "tile": ("box", "cell_size"),
    "wrap": ("box", "num_res_blocks", "res_width"),
    "rbf": ("anchors", "sigma"),
    "scaled_rbf": ("anchors", "sigma", "beta"),
    "grid": ("lambda_min", "lambda_max", "num_scales"),
    "hexa": ("lambda_min", "lambda_max", "num_scales"),
    "theory": ("lambda_min", "lambda_max", "num_scales"),
    "theorydiag": ("lambda_min", "lambda_max", "num_scales"),
    "polar": (),
    "polar_tile": ("r_max", "num_polar_bins"),
}


@dataclass
class EncoderConfig:
    kind: str
    out_dim: int = 64
    num_layers: int = 1
    hidden_dim: int = 512
    lambda_min: float | None = None
    lambda_max: float | None = None
    num_scales: int | None = None
    box: tuple[float, float, float, float] | None = None
    cell_size: float | None = None
    anchors: list[tuple[float, float]] | None = None
    sigma: float | None = None
    beta: float | None = None
    r_max: float | None = None
    num_polar_bins: int | None = None
    num_res_blocks: int | None = None
    res_width: int | None = None
    dropout: float = 0.5

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ConfigError(f"unknown encoder kind {self.kind!r}; expected one of {ENCODER_KINDS}")
        for name in _REQUIRED[self.kind]:
            if getattr(self, name) is None:
                raise ConfigError(f"encoder {self.kind!r} requires field {name!r}")
        if self.box is not None:
            self.box = tuple(float(v) for v in self.box)
        if self.anchors is not None:
            self.anchors = [tuple(float(c) for c in a) for a in self.anchors]
        if self.out_dim < 1 or self.hidden_dim < 1 or self.num_layers < 0:
            raise ConfigError("encoder dims must be positive and num_layers non-negative")

    def scale_spec(self) -> se.ScaleSpec:
        return se.ScaleSpec(self.lambda_min, self.lambda_max, self.num_scales)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["box"] is not None:
            d["box"] = list(d["box"])
        if d["anchors"] is not None:
            d["anchors"] = [list(a) for a in d["anchors"]]
        return {k: v for k, v in d.items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - names
        if extra:
            raise ConfigError(f"unknown encoder fields {sorted(extra)}")
        if "kind" not in d:
            raise ConfigError("encoder config requires field 'kind'")
        return cls(**d)


def raw_dim(cfg: EncoderConfig) -> int:
    k = cfg.kind
    if k in ("grid",):
        return 4 * cfg.num_scales
    if k in ("hexa", "theory", "theorydiag"):
        return 6 * cfg.num_scales
    if k in ("direct", "polar"):
        return 2
    if k == "wrap":
        return 4
    if k in ("rbf", "scaled_rbf"):
        return len(cfg.anchors)
    return 0


def raw_features(cfg: EncoderConfig, x: np.ndarray) -> np.ndarray:
    """Deterministic pre-network features (cell ids for the tile kinds)."""
    k = cfg.kind
    if k == "theory" or k == "theorydiag":
        return se.pe_theory(x, cfg.scale_spec())
    if k == "grid":
        return se.pe_grid(x, cfg.scale_spec())
    if k == "hexa":
        return se.pe_hexa(x, cfg.scale_spec())
    if k == "direct":
        return se.normalize_box(x, cfg.box)
    if k == "wrap":
        return se.wrap_features(x, cfg.box)
    if k == "rbf":
        return se.rbf_features(x, cfg.anchors, cfg.sigma)
    if k == "scaled_rbf":
        return se.scaled_rbf_features(x, cfg.anchors, cfg.sigma, cfg.beta)
    if k == "polar":
        return se.polar_transform(x)
    if k == "tile":
        return np.asarray(se.tile_index(x, cfg.box, cfg.cell_size))
    if k == "polar_tile":
        return np.asarray(se.polar_tile_index(x, cfg.r_max, cfg.num_polar_bins))
    raise ConfigError(f"unknown encoder kind {k!r}")


class ResidualBlock:
    """x + dense2(dropout(relu(dense1(x))))."""

    def __init__(self, store, name, dim, width, dropout: Dropout):
        self.inner = Dense(store, f"{name}.fc1", dim, width, "relu")
        self.outer = Dense(store, f"{name}.fc2", width, dim, "identity")
        self.dropout = dropout

    def forward(self, x):
        return x + self.outer.forward(self.dropout.forward(self.inner.forward(x)))

    def backward(self, dy):
        dh = self.inner.backward(self.dropout.backward(self.outer.backward(dy)))
        return dy + dh


class EncoderModel:
    """Maps locations (or displacements) ``[..., 2]`` to ``[..., out_dim]``.

    Dropout (wrap only) is active only after ``train()``; models start in
    inference mode.
    """

    def __init__(self, cfg: EncoderConfig, store: ParameterStore, prefix: str = "loc_enc",
                 seed: int = 0):
        self.cfg = cfg
        self.prefix = prefix
        self.training = False
        self.layers: list = []
        self.embedding: Embedding | None = None
        self.dropouts: list[Dropout] = []
        k = cfg.kind
        if k == "tile":
            nx, ny = se.tile_dims(cfg.box, cfg.cell_size)
            self.embedding = Embedding(store, f"{prefix}.tile", nx * ny, cfg.out_dim)
        elif k == "polar_tile":
            F = int(cfg.num_polar_bins)
            self.embedding = Embedding(store, f"{prefix}.polar_tile", F * F, cfg.out_dim)
        elif k == "wrap":
            self.layers.append(Dense(store, f"{prefix}.init", 4, cfg.out_dim, "relu"))
            for i in range(int(cfg.num_res_blocks)):
                drop = Dropout(cfg.dropout, derive_rng(seed, prefix, "dropout", i))
                self.dropouts.append(drop)
                self.layers.append(ResidualBlock(store, f"{prefix}.res{i}", cfg.out_dim,
                                                 int(cfg.res_width), drop))
        else:
            blocks = int(cfg.num_scales) if k == "theorydiag" else None
            dims = [raw_dim(cfg)] + [cfg.hidden_dim] * cfg.num_layers + [cfg.out_dim]
            for i in range(len(dims) - 1):
                last = i == len(dims) - 2
                self.layers.append(Dense(store, f"{prefix}.fc{i}", dims[i], dims[i + 1],
                                         "identity" if last else "relu", num_blocks=blocks))

    @property
    def out_dim(self) -> int:
        return self.cfg.out_dim

    def train(self, mode: bool = True):
        self.training = mode
        for d in self.dropouts:
            d.training = mode
        return self

    def eval(self):
        return self.train(False)

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        feats = raw_features(self.cfg, x)
        if self.embedding is not None:
            return self.embedding.forward(feats)
        h = feats
        for layer in self.layers:
            h = layer.forward(h)
        return h

    __call__ = forward

    def backward(self, dy: np.ndarray):
        if self.embedding is not None:
            self.embedding.backward(dy)
            return
        for layer in reversed(self.layers):
            dy = layer.backward(dy)


def build_encoder(cfg: EncoderConfig | dict, store: ParameterStore, prefix: str = "loc_enc",
                  seed: int = 0) -> EncoderModel:
    if isinstance(cfg, dict):
        cfg = EncoderConfig.from_dict(cfg)
    return EncoderModel(cfg, store, prefix=prefix, seed=seed)


def sample_point_anchors(locs: np.ndarray, M: int, rng: np.random.Generator) -> list:
    """M anchors drawn without replacement from training locations (with replacement if short)."""
    locs = np.asarray(locs, dtype=np.float64)
    idx = rng.choice(len(locs), M, replace=M > len(locs))
    return [tuple(map(float, p)) for p in locs[idx]]


def sample_disc_anchors(M: int, radius: float, rng: np.random.Generator) -> list:
    """M anchors uniform over the disc of the given radius around the origin."""
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, M))
    a = rng.uniform(0.0, 2 * math.pi, M)
    return [(float(x), float(y)) for x, y in zip(r * np.cos(a), r * np.sin(a))]
