"""Low-complexity CNN for retinal vessel segmentation: training, ternary
quantization of dense layers, magnitude pruning of conv layers, evaluation."""

from .netcore import Network, ShapeError, TrainingDiverged, build_network, reference_architecture

__version__ = "0.1.0"
__all__ = ["Network", "ShapeError", "TrainingDiverged", "build_network", "reference_architecture"]
