"""Deep tree network for zero-shot detection of unseen spoof types, on a small autodiff engine."""
from .errors import (ConvergenceError, DimensionError, DomainError, DTNError, FormatError,
                     NonFiniteError, UndefinedMetricError, UsageError)
from .tensor import Tensor, no_grad
from .tree import DESK, FULL, DeepTree, TreeConfig
from .trainer import TrainConfig, Trainer, fit
from .objectives import LossWeights
from .datagen import GenConfig, Dataset, Protocol, build_protocol, generate
from .evalkit import EvalReport, evaluate
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
