"""Multi-scale sinusoidal location encoders for point-feature data."""

from .encoder_assembly import ENCODER_KINDS, EncoderConfig, EncoderModel, build_encoder
from .errors import ConfigError, DataError, GridlocError, ShapeError, TrainingDivergence
from .evaluation import RankingReport, evaluate_model, evaluate_random
from .models import ContextModel, LocationModel, ModelSpec, PointTable, build_model, load_model, save_model
from .poi_data import Dataset, PointFeature, TypeVocabulary, generate_synthetic, load_poi_csv, split_dataset
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ENCODER_KINDS", "EncoderConfig", "EncoderModel", "build_encoder",
    "ConfigError", "DataError", "GridlocError", "ShapeError", "TrainingDivergence",
    "RankingReport", "evaluate_model", "evaluate_random",
    "ContextModel", "LocationModel", "ModelSpec", "PointTable", "build_model", "load_model", "save_model",
    "Dataset", "PointFeature", "TypeVocabulary", "generate_synthetic", "load_poi_csv", "split_dataset",
    "TrainConfig", "train",
]
