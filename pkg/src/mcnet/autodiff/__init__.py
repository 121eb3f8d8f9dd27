"""Minimal reverse-mode differentiation over numpy arrays."""

from . import ops
from .tensor import NonFiniteError, Tape, TapeError, Tensor, backward, detach, make_result

__all__ = ["NonFiniteError", "Tape", "TapeError", "Tensor", "backward", "detach", "make_result", "ops"]
