"""Two-stage domain-adaptation segmentation pipeline for 2-D CT-style slices.

Stage one trains a segmenter adversarially against mask- and feature-level
domain discriminators, with classifier-derived attention sharpening the main
decoding head. Stage two refines the result by cyclic self-training on pseudo
labels, pulling both the weights and the labels back toward their initial
versions by exact convex combinations each cycle.
"""

__version__ = "0.1.0"

from .adaptation import TrainingConfig, poly_lr, train_afd_da, train_cam_extractor
from .errors import ConfigError, DataError, DascsegError, NumericalAbortError
from .evalmetrics import MetricsReport, evaluate
from .losses import LossWeights
from .selfcorrect import PseudoLabelSet, SelfCorrectionConfig, run_self_correction
from .synthbench import SynthSpec, generate, shift_mild, shift_strong

__all__ = [
    "ConfigError",
    "DataError",
    "DascsegError",
    "LossWeights",
    "MetricsReport",
    "NumericalAbortError",
    "PseudoLabelSet",
    "SelfCorrectionConfig",
    "SynthSpec",
    "TrainingConfig",
    "__version__",
    "evaluate",
    "generate",
    "poly_lr",
    "run_self_correction",
    "shift_mild",
    "shift_strong",
    "train_afd_da",
    "train_cam_extractor",
]
