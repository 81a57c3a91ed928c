"""JSON run configuration and the per-task encoder defaults."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError
from .poi_data import process_from_dict


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticConfig(_Strict):
    bbox: tuple[float, float, float, float]
    components: list[dict]

    @field_validator("components")
    @classmethod
    def _components(cls, v):
        if not v:
            raise ValueError("at least one component is required")
        for c in v:
            process_from_dict(c)
        return v


class DatasetConfig(_Strict):
    path: Optional[str] = None
    synthetic: Optional[SyntheticConfig] = None


class SplitConfig(_Strict):
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)


class EncoderSection(_Strict):
    kind: str = "theory"
    out_dim: int = 64
    num_layers: int = 1
    hidden_dim: int = 512
    lambda_min: Optional[float] = None
    lambda_max: Optional[float] = None
    num_scales: Optional[int] = None
    cell_size: Optional[float] = None
    num_anchors: Optional[int] = None
    sigma: Optional[float] = None
    beta: Optional[float] = None
    r_max: Optional[float] = None
    num_polar_bins: Optional[int] = None
    num_res_blocks: Optional[int] = None
    res_width: Optional[int] = None
    dropout: Optional[float] = None


class ModelSection(_Strict):
    feat_dim: int = 64
    context_size: int = 10
    heads: int = 4
    activation: Literal["sigmoid", "tanh", "identity"] = "sigmoid"


class TrainSection(_Strict):
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    num_negatives: int = 10


class EvalSection(_Strict):
    num_negatives: int = 100
    k: int = 5
    repeats: int = 10
    split: Literal["train", "val", "test"] = "test"


class AnalysisSection(_Strict):
    thresholds: tuple[float, float] = (100.0, 200.0)
    y: float = 3.0
    reference_area: float = 1e6
    radius_step: float = 1.0
    radius_max: float = 3000.0


class VizSection(_Strict):
    neurons: list[int] = Field(default_factory=lambda: list(range(8)))
    resolution: tuple[int, int] = (64, 64)
    clusters: int = 8
    extent: Optional[tuple[float, float, float, float]] = None


class RunConfig(_Strict):
    seed: int = 0
    output_dir: str = "out"
    task: Literal["loc", "cont"] = "loc"
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    split: SplitConfig = Field(default_factory=SplitConfig)
    encoder: EncoderSection = Field(default_factory=EncoderSection)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    analysis: AnalysisSection = Field(default_factory=AnalysisSection)
    viz: VizSection = Field(default_factory=VizSection)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return parse_config(raw, source=str(path))


def parse_config(raw: dict, source: str = "<config>") -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{source}: {exc}") from None


# Hyper-parameter defaults per task (best settings from the grid searches
# reported for the location and context setups).
TASK_DEFAULTS = {
    "loc": {
        "sinusoidal": {"lambda_min": 50.0, "lambda_max": 40000.0, "num_scales": 64},
        "tile": {"cell_size": 500.0},
        "rbf": {"num_anchors": 200, "sigma": 1000.0},
        "scaled_rbf": {"num_anchors": 200, "sigma": 1000.0, "beta": 0.1},
        "wrap": {"num_res_blocks": 3, "res_width": 512},
        "polar_tile": {"num_polar_bins": 64},
    },
    "cont": {
        "sinusoidal": {"lambda_min": 10.0, "lambda_max": 10000.0, "num_scales": 64},
        "tile": {"cell_size": 50.0},
        "rbf": {"num_anchors": 100, "sigma": 50.0},
        "scaled_rbf": {"num_anchors": 100, "sigma": 40.0, "beta": 0.1},
        "wrap": {"num_res_blocks": 2, "res_width": 512},
        "polar_tile": {"num_polar_bins": 64},
    },
}

# Choices the source experiments leave open; echoed into run metadata.
OPEN_CHOICE_DEFAULTS = {
    "optimizer": "adam(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8)",
    "batch_size": 32,
    "epochs": 100,
    "train_negatives": 10,
    "attention_heads": 4,
    "wrap_dropout": 0.5,
    "type_embedding_normalization": "L2 projection after every optimizer step",
    "model_selection": "best validation NLL",
    "context_neighbors": "drawn from the full dataset, excluding the center",
}


def resolved_encoder_params(task: str, enc: EncoderSection) -> dict:
    """Encoder section with task defaults filled in for fields left unset."""
    kind = enc.kind
    group = "sinusoidal" if kind in ("grid", "hexa", "theory", "theorydiag") else kind
    out = enc.model_dump()
    for key, val in TASK_DEFAULTS[task].get(group, {}).items():
        if out.get(key) is None:
            out[key] = val
    if out.get("dropout") is None:
        out["dropout"] = 0.5
    return out
