"""Attentive contextual attention cloud removal toolkit."""

from . import attention, data, metrics, network, tensor, trainer
from .tensor import Tensor, RngStream, grad_check, no_grad

__all__ = [
    "attention", "data", "metrics", "network", "tensor", "trainer",
    "Tensor", "RngStream", "grad_check", "no_grad",
]

__version__ = "0.1.0"
