"""Exception taxonomy shared across the package.

Every error raised on purpose derives from LangFieldError so callers (and
the CLI) can distinguish our failures from genuine bugs.
"""

from __future__ import annotations


class LangFieldError(Exception):
    pass


class InvalidParameterError(LangFieldError, ValueError):
    """A value violates a documented precondition."""


class ShapeError(LangFieldError, ValueError):
    """An array has the wrong shape or length."""


class FormatError(LangFieldError, ValueError):
    """A file does not conform to its on-disk format contract."""


class TokenLookupError(LangFieldError, LookupError):
    """A query token is missing from the codebook."""


class DegenerateHullError(LangFieldError):
    """Convex hull input spans fewer than three dimensions."""

    def __init__(self, rank: int, message: str | None = None):
        self.rank = rank
        super().__init__(message or f"point set is degenerate (affine rank {rank})")


class NoMatchError(LangFieldError):
    """A selection matched no Gaussians; the scene is left unchanged."""


class NonFiniteGradientError(LangFieldError):
    """Training aborted because a loss produced non-finite gradients."""

    def __init__(self, loss_name: str, iteration: int):
        self.loss_name = loss_name
        self.iteration = iteration
        super().__init__(f"non-finite gradient in {loss_name} at iteration {iteration}")
