"""Few-shot meta-learning with additional connection units (ACUs).

A small numpy stack: reverse-mode autodiff, a four-module conv net,
first-order MAML / ANIL meta-training, and MAC meta-testing that widens a
meta-trained network with fresh units before adaptation.
"""
from .autodiff import Tape, Tensor, backward, sgd_step
from .nn import Model, ModelConfig, build_model, forward, load_checkpoint, save_checkpoint
from .widening import PRESETS, WidenPlan, widen
from .meta import EvalReport, InnerConfig, MetaConfig, evaluate, inner_adapt, mac_meta_test, meta_train

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "backward", "sgd_step",
    "Model", "ModelConfig", "build_model", "forward", "load_checkpoint", "save_checkpoint",
    "PRESETS", "WidenPlan", "widen",
    "EvalReport", "InnerConfig", "MetaConfig", "evaluate", "inner_adapt", "mac_meta_test", "meta_train",
]
