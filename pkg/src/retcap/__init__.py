"""Keyword-guided retinal image captioning with guided context attention.

Built on a small numpy autodiff core (:mod:`retcap.tensor`).
"""
from .config import ModelConfig
from .tensor import Tensor, no_grad

__version__ = "0.1.0"
__all__ = ["ModelConfig", "Tensor", "no_grad", "__version__"]
