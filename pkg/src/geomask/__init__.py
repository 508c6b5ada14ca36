"""Geometry-masked reconstruction transformer for multi-category point-cloud anomaly detection."""

from .datasets import (BenchmarkConfig, Dataset, Sample, build_benchmark, inject_anomaly, load_cloud,
                       load_dataset, load_ply, load_xyz, save_ply, save_xyz, synth_category)
from .geometry import DegenerateInputError, PointCloud, geometry_profile
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .pipeline import (AnomalyResult, MetricError, TrainConfig, auroc, canonicalize, evaluate, score,
                       train)

__version__ = "0.1.0"

__all__ = [
    "AnomalyResult", "BenchmarkConfig", "Dataset", "DegenerateInputError", "MetricError", "Model",
    "ModelConfig", "PointCloud", "Sample", "TrainConfig", "auroc", "build_benchmark", "canonicalize",
    "evaluate", "geometry_profile", "inject_anomaly", "load_checkpoint", "load_cloud", "load_dataset",
    "load_ply", "load_xyz", "save_checkpoint", "save_ply", "save_xyz", "score", "synth_category", "train",
]
