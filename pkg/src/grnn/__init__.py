"""Graph-regularized neural network (GRNN) classification of hyperspectral images."""

__version__ = "0.1.0"

from .core import ClassificationMap, HsiCube, LabelMap, SuperpixelSegmentation  # noqa: E402

__all__ = ["ClassificationMap", "HsiCube", "LabelMap", "SuperpixelSegmentation", "__version__"]
