"""Volumetric CT classification engine: numpy autodiff, 3D ResNet-18 (+MHA), training CLI."""

from volnet.tensor import GradMap, ShapeError, Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = ["GradMap", "ShapeError", "Tape", "Tensor", "backward", "__version__"]
