"""Incremental few-shot instance segmentation on synthetic shapes."""
from .core import BinaryMask, Box, Detection, InstanceAnnotation
from .estimator import IMTFADetector
from .evaluate import EpisodeSpec, EvalReport, run_episodes
from .imprint import ClassRegistry, cosine_scores, imprint_class, load_registry, save_registry
from .model import DetectorModel, ModelConfig
from .shapesdata import ClassSplit, ShapesDataset, generate_dataset, load_dataset, sample_shots, save_dataset
from .train import TrainConfig, finetune_imtfa_stage2, finetune_mtfa, train_one_stage, train_stage1

__version__ = "0.1.0"

__all__ = [
    "BinaryMask",
    "Box",
    "ClassRegistry",
    "ClassSplit",
    "Detection",
    "DetectorModel",
    "EpisodeSpec",
    "EvalReport",
    "IMTFADetector",
    "InstanceAnnotation",
    "ModelConfig",
    "ShapesDataset",
    "TrainConfig",
    "cosine_scores",
    "finetune_imtfa_stage2",
    "finetune_mtfa",
    "generate_dataset",
    "imprint_class",
    "load_dataset",
    "load_registry",
    "run_episodes",
    "sample_shots",
    "save_dataset",
    "save_registry",
    "train_one_stage",
    "train_stage1",
]
