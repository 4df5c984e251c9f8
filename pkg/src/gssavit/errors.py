"""Exception types raised across the package."""


class GssaError(Exception):
    """Base class for all package errors."""


class DimensionError(GssaError, ValueError):
    """A grid or stencil dimension is too small."""


class GridMismatchError(GssaError, ValueError):
    """Two fields or a field and a grid disagree."""


class DegenerateQuaternionError(GssaError, ValueError):
    """Quaternion norm too close to zero to define a rotation."""


class ShapeMismatchError(GssaError, ValueError):
    """Tensor shapes are incompatible for an operation."""


class NonFiniteError(GssaError, FloatingPointError):
    """A forward computation produced NaN or Inf."""


class StaleGraphError(GssaError, RuntimeError):
    """Backward was requested on a graph that was already consumed."""


class NonScalarLossError(GssaError, ValueError):
    """Backward was requested on a tensor with more than one element."""


class NonPositiveRatioError(GssaError, ValueError):
    """A downscaling ratio must be strictly positive."""


class ConstantVariableError(GssaError, ValueError):
    """Normalization statistics require max > min."""


class DatasetTooShortError(GssaError, ValueError):
    """Not enough time steps for the requested pairing."""


class DivergenceError(GssaError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class FormatError(GssaError, ValueError):
    """Base class for on-disk format violations."""


class BadMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class SizeMismatchError(FormatError):
    pass
