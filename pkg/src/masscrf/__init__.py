"""Breast-mass ROI segmentation: FCN unaries, unrolled mean-field CRF and adversarial training."""

from .errors import MassCrfError
from .tensor import Tensor, backward, grad

__version__ = "0.1.0"

__all__ = ["MassCrfError", "Tensor", "backward", "grad", "__version__"]
