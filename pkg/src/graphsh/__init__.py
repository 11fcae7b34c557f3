"""Stacked graph hourglass networks for lifting 2D joint detections to 3D poses."""

from .config import NetworkConfig, RunConfig, TrainConfig, load_config
from .data import Camera, Normalizer, PoseDataset, fit_normalizer, load_dataset, synth_generate, write_dataset
from .evaluation import EvalReport, evaluate, mpjpe
from .network import GraphSH, SeqRes, build_model, count_params, deserialize_model, serialize_model
from .skeleton import SkeletonSpec, build_default_skeleton, load_skeleton, validate_skeleton
from .tensor import Tensor, backward
from .training import adam_step, lr_at, mse_loss, train

__all__ = [
    "Camera",
    "EvalReport",
    "GraphSH",
    "NetworkConfig",
    "Normalizer",
    "PoseDataset",
    "RunConfig",
    "SeqRes",
    "SkeletonSpec",
    "Tensor",
    "TrainConfig",
    "adam_step",
    "backward",
    "build_default_skeleton",
    "build_model",
    "count_params",
    "deserialize_model",
    "evaluate",
    "fit_normalizer",
    "load_config",
    "load_dataset",
    "load_skeleton",
    "lr_at",
    "mpjpe",
    "mse_loss",
    "serialize_model",
    "synth_generate",
    "train",
    "validate_skeleton",
    "write_dataset",
]
