"""End-to-end models for the two task setups, and their checkpoints.

``LocationModel`` predicts a point's feature embedding from its location;
``ContextModel`` predicts it from the feature embeddings of its n nearest
neighbors and their displacements.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .decoders import ContextDecoder, LocationDecoder
from .encoder_assembly import EncoderConfig, EncoderModel
from .errors import ConfigError, DataError
from .feature_encoder import FeatureEncoder, membership_matrix
from .neural_core import ParameterStore, load_checkpoint_into, read_checkpoint, save_checkpoint
from .poi_data import Dataset, knn_table

TASKS = ("loc", "cont")


class PointTable:
    """Array views of a dataset that the models index by row."""

    def __init__(self, ds: Dataset):
        self.ds = ds
        self.locs = ds.locs
        self.members = membership_matrix(ds.type_sets, len(ds.vocab))
        self._knn: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.locs)

    def neighbors(self, n: int) -> np.ndarray:
        if n not in self._knn:
            self._knn[n] = knn_table(self.ds, n)
        return self._knn[n]


@dataclass
class ModelSpec:
    task: str
    vocab_size: int
    feat_dim: int = 64
    encoder: EncoderConfig | None = None
    context_size: int = 10
    heads: int = 4
    activation: str = "sigmoid"
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "loc" and self.encoder is None:
            raise ConfigError("the loc task needs a location encoder")
        if self.task == "cont" and self.context_size < 1:
            raise ConfigError("context size must be at least 1")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "vocab_size": self.vocab_size,
            "feat_dim": self.feat_dim,
            "encoder": None if self.encoder is None else self.encoder.to_dict(),
            "context_size": self.context_size,
            "heads": self.heads,
            "activation": self.activation,
            "seed": self.seed,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        enc = d.pop("encoder", None)
        return cls(encoder=None if enc is None else EncoderConfig.from_dict(enc), **d)


class _Model:
    spec: ModelSpec
    store: ParameterStore
    features: FeatureEncoder
    encoder: EncoderModel | None

    def train(self, mode: bool = True):
        if self.encoder is not None:
            self.encoder.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def predict_all(self, data: PointTable, rows, chunk: int = 1024) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        out = [self.predict(data, rows[i:i + chunk]) for i in range(0, len(rows), chunk)]
        return np.concatenate(out) if out else np.zeros((0, self.spec.feat_dim))

    def feature_embeddings(self, data: PointTable) -> np.ndarray:
        return self.features.forward(data.members)


class LocationModel(_Model):
    def __init__(self, spec: ModelSpec, store: ParameterStore | None = None):
        self.spec = spec
        self.store = store if store is not None else ParameterStore()
        self.features = FeatureEncoder(self.store, spec.vocab_size, spec.feat_dim)
        self.encoder = EncoderModel(spec.encoder, self.store, "loc_enc", seed=spec.seed)
        self.decoder = LocationDecoder(self.store, spec.encoder.out_dim, spec.feat_dim)

    def predict_coords(self, coords: np.ndarray) -> np.ndarray:
        return self.decoder.forward(self.encoder.forward(coords))

    def predict(self, data: PointTable, rows) -> np.ndarray:
        return self.predict_coords(data.locs[np.asarray(rows)])

    def backward(self, dpred: np.ndarray):
        self.encoder.backward(self.decoder.backward(dpred))


class ContextModel(_Model):
    def __init__(self, spec: ModelSpec, store: ParameterStore | None = None):
        self.spec = spec
        self.store = store if store is not None else ParameterStore()
        self.features = FeatureEncoder(self.store, spec.vocab_size, spec.feat_dim)
        self.encoder = None
        if spec.encoder is not None:
            self.encoder = EncoderModel(spec.encoder, self.store, "disp_enc", seed=spec.seed)
        disp_dim = 0 if self.encoder is None else spec.encoder.out_dim
        self.decoder = ContextDecoder(self.store, spec.feat_dim, disp_dim, spec.heads,
                                      spec.activation)
        self._cache = None

    def predict_context(self, V: np.ndarray, disp: np.ndarray) -> np.ndarray:
        """``V``: [B, n, dv] neighbor feature embeddings, ``disp``: [B, n, 2] center minus neighbor."""
        X = None if self.encoder is None else self.encoder.forward(disp)
        return self.decoder.forward(V, X)

    def predict(self, data: PointTable, rows) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        nbr = data.neighbors(self.spec.context_size)[rows]             # [B, n]
        members = data.members[nbr.ravel()]
        V = self.features.forward(members).reshape(*nbr.shape, -1)
        disp = data.locs[rows][:, None, :] - data.locs[nbr]
        self._cache = (members, nbr.shape)
        return self.predict_context(V, disp)

    def backward(self, dpred: np.ndarray):
        dV, dX = self.decoder.backward(dpred)
        if self.encoder is not None:
            self.encoder.backward(dX)
        if self._cache is not None:
            members, shape = self._cache
            self.features.backward(members, dV.reshape(shape[0] * shape[1], -1))
        return dV


def build_model(spec: ModelSpec, store: ParameterStore | None = None, init: bool = True):
    """Construct the model for ``spec.task``; parameters are initialized from ``spec.seed``."""
    cls = LocationModel if spec.task == "loc" else ContextModel
    model = cls(spec, store)
    if init:
        model.store.init_params(spec.seed)
    return model


def save_model(model, path: str | Path, header: dict | None = None):
    doc = {"model": model.spec.to_dict()}
    doc.update(header or {})
    save_checkpoint(model.store, path, doc)


def load_model(path: str | Path):
    """Rebuild a model from the spec stored in a checkpoint header; returns (model, header)."""
    header, _ = read_checkpoint(path)
    if "model" not in header:
        raise DataError(f"{path}: checkpoint header has no model spec")
    model = build_model(ModelSpec.from_dict(header["model"]), init=False)
    load_checkpoint_into(model.store, path)
    model.eval()
    return model, header
