"""picoweave: desk-scale interleaved image-text pre-training lab."""

from picoweave.tensor import Tensor, backward, no_grad, finite_difference_check

__all__ = ["Tensor", "backward", "no_grad", "finite_difference_check"]

__version__ = "0.1.0"
