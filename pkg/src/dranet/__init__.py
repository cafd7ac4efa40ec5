"""Reverse-attention compositional recognition at desk scale.

Non-local attention branches extract context-heavy attribute features,
local attention branches extract object features, and each branch also
emits a reversed (complement-attention) embedding. Reversals are swapped
into auxiliary classifiers and act as distillation teachers to pull the
two branches apart. Inference fuses forward and reversal predictions over
the full open-world attribute-object product, evaluated with a
calibrated seen-pair bias sweep.
"""

from .core import CompositionLabel, DatasetSplit, VocabularySpec, open_world_space, validate_split
from .evaluation import FusionWeights, MetricsReport, ScoreMatrix
from .kernels import BACKEND as KERNEL_BACKEND
from .losses import LossBreakdown, LossWeights
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .synth import GeneratorConfig, SplitSpec, generate_dataset, load_external_split

__version__ = "0.1.0"

__all__ = [
    "CompositionLabel",
    "DatasetSplit",
    "FusionWeights",
    "GeneratorConfig",
    "KERNEL_BACKEND",
    "LossBreakdown",
    "LossWeights",
    "MetricsReport",
    "ModelConfig",
    "ScoreMatrix",
    "SplitSpec",
    "VocabularySpec",
    "generate_dataset",
    "init_params",
    "load_checkpoint",
    "load_external_split",
    "open_world_space",
    "save_checkpoint",
    "validate_split",
    "__version__",
]
