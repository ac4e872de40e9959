"""Dynamic-capacity prototype head for classification and regression.

The head keeps a grow-and-shrink set of prototypes in a learned feature
space: prediction mixes per-prototype outputs by Gaussian responsibility,
distant examples spawn new prototypes, and a discounted importance window
prunes the ones no data supports.
"""

from .core import (
    CLASSIFICATION,
    REGRESSION,
    EmbeddedExample,
    Prototype,
    PrototypeStore,
    TrainConfig,
)
from .dynamics import ImportanceWindow, compute_lambda, init_prototypes, maybe_create, prune
from .encoder import Encoder, EncoderSpec
from .inference import (
    ImportanceRow,
    Prediction,
    classify,
    examples_within,
    importance,
    nearest_examples,
    prototype_prediction,
    regress,
)
from .objective import Adam, LossBreakdown, backward, diversity_loss, project_constraints, task_loss
from .training import TrainResult, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "CLASSIFICATION",
    "REGRESSION",
    "EmbeddedExample",
    "Prototype",
    "PrototypeStore",
    "TrainConfig",
    "ImportanceWindow",
    "compute_lambda",
    "init_prototypes",
    "maybe_create",
    "prune",
    "Encoder",
    "EncoderSpec",
    "ImportanceRow",
    "Prediction",
    "classify",
    "regress",
    "importance",
    "prototype_prediction",
    "nearest_examples",
    "examples_within",
    "Adam",
    "LossBreakdown",
    "backward",
    "task_loss",
    "diversity_loss",
    "project_constraints",
    "TrainResult",
    "train",
    "evaluate",
    "__version__",
]
