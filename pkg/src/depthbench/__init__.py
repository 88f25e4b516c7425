"""Anytime stereo and lightweight monocular depth networks on a from-scratch numpy autodiff core."""
from .tensor import NonFiniteError, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "no_grad", "NonFiniteError", "__version__"]
