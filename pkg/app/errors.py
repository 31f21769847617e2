"""Error types raised across cmplab.

Each class also derives from the closest builtin so callers can catch either.
"""

from __future__ import annotations

from typing import Optional


class CmpLabError(Exception):
    """Base class for every cmplab failure."""


class DimensionError(CmpLabError, ValueError):
    """Two tensors have shapes that do not conform."""

    def __init__(self, op: str, left, right):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{op}: shape mismatch {self.left} vs {self.right}")


class ContractError(CmpLabError, ValueError):
    """A precondition of an operation was violated."""


class IndexOutOfRange(CmpLabError, IndexError):
    """An index (class target, token id, chain step) lies outside its range."""


class NumericError(CmpLabError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, msg: str, checkpoint: Optional[str] = None):
        self.checkpoint = checkpoint
        if checkpoint:
            msg = f"{msg} (last good checkpoint: {checkpoint})"
        super().__init__(msg)


class NoCroppableSegments(CmpLabError):
    """A crop was requested but every retained segment is support."""


class ConfigError(CmpLabError, ValueError):
    """Invalid generator or training configuration."""
