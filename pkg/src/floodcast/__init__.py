"""Flood-overflow prediction for channel sensor networks.

A hybrid time-series classifier (gated recurrent branch + temporal
convolution branch) trained with a weighted cross-entropy loss, plus a
synthetic channel-network flood simulator, imbalanced-classification
evaluation tools, and a command-line pipeline tying them together.
"""

from . import autodiff, evaluation, fastgrnn, fcn, floodgen, model
from .autodiff import Node, Rng, backward, grad_check, zero_grads
from .errors import FloodcastError

__version__ = "0.1.0"

__all__ = [
    "autodiff", "evaluation", "fastgrnn", "fcn", "floodgen", "model",
    "Node", "Rng", "backward", "grad_check", "zero_grads", "FloodcastError",
    "__version__",
]
