from __future__ import annotations


class DopsError(Exception):
    """Base class for every error raised by the detection / shape pipeline."""


class ContractViolation(DopsError, ValueError):
    """A documented pre-condition of an operation does not hold."""


class ShapeMismatchError(DopsError, ValueError):
    """Array shapes or channel counts do not line up."""


class EmptyInputError(DopsError, ValueError):
    pass


class DuplicateKeyError(DopsError, ValueError):
    pass


class SceneGenerationError(DopsError):
    """Object placement gave up after the bounded number of retries."""


class ShapeObservationError(DopsError):
    """An observed object has no usable points left for the shape loss."""


class ConfigError(DopsError):
    pass


class DataFormatError(DopsError):
    pass


class NumericalFailure(DopsError):
    """A numerical check (e.g. a gradient check) exceeded its tolerance."""
