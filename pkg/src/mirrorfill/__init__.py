"""mirrorfill: symmetry-guided face completion on procedural data.

The pipeline estimates a dense correspondence between an occluded face and
its horizontal flip, fills mirror-visible missing pixels by illumination-
reweighted warping, and reconstructs the rest generatively under a
feature-space symmetry penalty.
"""

from .errors import (
    DimensionError,
    DomainError,
    FormatError,
    MirrorFillError,
    NumericError,
    TrainingDiverged,
    ValidationError,
)
from .landmarks import LandmarkSet
from .losses import LossReport, LossWeights
from .masks import MaskPair
from .pipeline import PipelineOutput, complete, run_pipeline
from .synth import SyntheticFaceSample, generate_face
from .trainer import TrainConfig, TrainingState, train_full
from .warp import FlowField

__version__ = "0.1.0"

__all__ = [
    "DimensionError", "DomainError", "FormatError", "MirrorFillError",
    "NumericError", "TrainingDiverged", "ValidationError",
    "FlowField", "LandmarkSet", "LossReport", "LossWeights", "MaskPair",
    "PipelineOutput", "SyntheticFaceSample", "TrainConfig", "TrainingState",
    "complete", "generate_face", "run_pipeline", "train_full",
    "__version__",
]
