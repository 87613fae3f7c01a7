"""flowstrike: train a conditional normalizing flow on white-box adversarial
pairs, then run query-limited hard-label attacks from it."""

__version__ = "0.1.0"

from .tensor import Prng, Tensor, no_grad  # noqa: F401
