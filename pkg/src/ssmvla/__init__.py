"""Selective state-space vision-language-action policy at desk scale."""

__version__ = "0.1.0"

from .tensor import Tape, Tensor, backward, grad_check  # noqa: F401
