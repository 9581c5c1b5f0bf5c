"""Unstructured neural-network pruning with per-layer learned thresholds.

Weights train against soft sigmoid masks whose thresholds are learned by
gradient descent under a differentiable L0 penalty; finished runs are
hard-pruned, finetuned with frozen masks, and exported as CSR artifacts.
"""

from .autograd import Tensor, backward, no_grad, reset_tape
from .pruning import (
    GRAD_MODES,
    LambdaState,
    PrunableParam,
    PruneHyperParams,
    hard_prune,
    lambda_step,
    layer_temperature,
    soft_l0,
    soft_prune,
    threshold_step,
    weight_grad,
)
from .runconfig import RunConfig, load_config, parse_config, serialize_config
from .training import TrailCheckpoint, evaluate, finalize, finetune, prune_run, sweep

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "reset_tape",
    "GRAD_MODES",
    "LambdaState",
    "PrunableParam",
    "PruneHyperParams",
    "hard_prune",
    "lambda_step",
    "layer_temperature",
    "soft_l0",
    "soft_prune",
    "threshold_step",
    "weight_grad",
    "RunConfig",
    "load_config",
    "parse_config",
    "serialize_config",
    "TrailCheckpoint",
    "evaluate",
    "finalize",
    "finetune",
    "prune_run",
    "sweep",
    "__version__",
]
