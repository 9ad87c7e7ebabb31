"""Exception hierarchy shared across the package."""


class CoherDiffError(Exception):
    """Base class for all package errors."""


class DimensionError(CoherDiffError, ValueError):
    """Operand shapes are incompatible."""


class MaskingError(CoherDiffError, ValueError):
    """A softmax slice has no unmasked entry."""


class RectificationError(MaskingError):
    """A pixel has no allowed token in a region mask."""


class ParameterError(CoherDiffError, ValueError):
    """An argument lies outside its documented domain."""


class EvaluationError(CoherDiffError, ArithmeticError):
    """A function evaluated to a non-finite value."""


class TrainingError(CoherDiffError, ArithmeticError):
    """Non-finite loss or prediction during training."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class SamplingError(CoherDiffError, ArithmeticError):
    """Non-finite state during reverse diffusion."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class VocabularyError(CoherDiffError, KeyError):
    """Unknown word or token id."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class CheckpointError(CoherDiffError, IOError):
    """Corrupt or incompatible checkpoint file."""


class GenerationError(CoherDiffError, ValueError):
    """A synthetic scene could not be generated."""


class DatasetError(CoherDiffError, ValueError):
    """A dataset item violates a layout/text closure constraint."""
