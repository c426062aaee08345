"""exitwise: self-distillation training and anytime inference for multi-exit
sequence classifiers, on a small numpy-backed autodiff core."""

from .backbone import Backbone, BackboneConfig, load_checkpoint
from .exits import ExitSpec, MultiExitModel, attach_exits
from .losses import LossWeights, total_loss
from .runtime import Budget, ExitCatalog, fuse, predict_at_exit, select_exit
from .tensor import Tensor, backward, no_grad
from .trainer import TrainConfig, evaluate, fit_self_distill

__version__ = "0.1.0"

__all__ = [
    "Backbone",
    "BackboneConfig",
    "Budget",
    "ExitCatalog",
    "ExitSpec",
    "LossWeights",
    "MultiExitModel",
    "Tensor",
    "TrainConfig",
    "attach_exits",
    "backward",
    "evaluate",
    "fit_self_distill",
    "fuse",
    "load_checkpoint",
    "no_grad",
    "predict_at_exit",
    "select_exit",
    "total_loss",
    "__version__",
]
