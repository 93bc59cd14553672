"""fncgen: conditional ViT-GAN synthesis of functional network connectivity
matrices from 3D structural volumes, on a self-contained synthetic cohort."""

__version__ = "0.1.0"

from .tensor import Tensor, backward, no_grad, zero_grads  # noqa: F401
