"""Configuration, synthetic data, training, ablations, probes and visualization."""
from psearch.pipeline.config import PipelineConfig
from psearch.pipeline.data import ToyDataset, build_protocol, generate_toy_dataset
from psearch.pipeline.train import evaluate_model, load_checkpoint, train

__all__ = [
    "PipelineConfig",
    "ToyDataset",
    "build_protocol",
    "evaluate_model",
    "generate_toy_dataset",
    "load_checkpoint",
    "train",
]
