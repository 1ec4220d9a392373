"""multicos: bi-space multimodal fusion segmentation on a numpy autodiff core."""

from .tensor import Tensor, backward, grad_check, no_grad

__all__ = ["Tensor", "backward", "grad_check", "no_grad"]
__version__ = "0.1.0"
