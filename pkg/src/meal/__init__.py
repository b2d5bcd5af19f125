"""Adversarial block-wise knowledge distillation for model ensembles and noisy labels."""

from .data import Dataset, StepMetrics, gen_synthetic, load_checkpoint, save_checkpoint
from .distill import DistillConfig
from .ensemble import ModelZoo, build_zoo, distill_ensemble, select_teacher, traditional_ensemble_predict
from .networks import BlockNetwork, BlockSpec, TeacherModel, TrainHyper, evaluate, pretrain_teacher
from .noisy import NoiseSpec, inject_noise, iterative_refine
from .trainer import TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "BlockNetwork", "BlockSpec", "Dataset", "DistillConfig", "ModelZoo", "NoiseSpec", "StepMetrics",
    "TeacherModel", "TrainHyper", "TrainResult", "build_zoo", "distill_ensemble", "evaluate",
    "gen_synthetic", "inject_noise", "iterative_refine", "load_checkpoint", "pretrain_teacher",
    "save_checkpoint", "select_teacher", "train", "traditional_ensemble_predict",
]
