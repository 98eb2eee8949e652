"""Predict spatial protein expression from spatial transcriptomics with a
weight-tied graph-attention autoencoder."""

__version__ = "0.1.0"

from .config import LossWeights, TrainConfig
from .dataset import (
    PreprocessState,
    ProcessedDataset,
    SpatialOmicsDataset,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
)
from .graph import FeatureGraph, build_knn_graph, build_spatial_graph
from .preprocess import preprocess_training_pair
from .optim import predict, train
from .cluster import assign, fit_gmm
from .metrics import EvalReport, evaluate
from .synth import synthesize

__all__ = [
    "LossWeights", "TrainConfig", "PreprocessState", "ProcessedDataset",
    "SpatialOmicsDataset", "load_checkpoint", "load_dataset", "save_checkpoint",
    "FeatureGraph", "build_knn_graph", "build_spatial_graph",
    "preprocess_training_pair", "predict", "train", "assign", "fit_gmm",
    "EvalReport", "evaluate", "synthesize",
]
