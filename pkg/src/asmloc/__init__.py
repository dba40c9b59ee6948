"""Weakly-supervised temporal action localization with action-aware segment modeling.

A small numpy implementation: reverse-mode autodiff, the MIL base model,
dynamic segment sampling, intra/inter-segment attention, uncertainty-weighted
pseudo-instance supervision, multi-step proposal refinement and the usual
mAP@tIoU evaluation.
"""

from .config import EvalConfig, ModelConfig, OptimConfig, RefinementSchedule, RunConfig
from .dataset import SyntheticConfig, VideoRecord, generate_synthetic, load_dataset, make_splits
from .evaluation import evaluate, predict_video
from .model import TrainedModel, forward, init_params
from .training import refine

__all__ = ["EvalConfig", "ModelConfig", "OptimConfig", "RefinementSchedule", "RunConfig",
           "SyntheticConfig", "VideoRecord", "generate_synthetic", "load_dataset", "make_splits",
           "evaluate", "predict_video", "TrainedModel", "forward", "init_params", "refine"]
__version__ = "0.1.0"
