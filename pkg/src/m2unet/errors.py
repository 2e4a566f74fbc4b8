"""Exception hierarchy shared by the whole engine.

The CLI maps these onto stable exit codes (see cli.py):
usage errors -> 1, data errors -> 2, numeric errors -> 3.
"""


class EngineError(Exception):
    """Base class for all engine-raised errors."""


class UsageError(EngineError):
    """Caller invoked an operation with unusable arguments (bad flags,
    empty threshold list, k >= training-set size, unknown dataset...)."""


class DataError(EngineError):
    """Input data violates a contract: shape mismatches, malformed files,
    wrong native resolution, missing ground truth."""


class ShapeMismatchError(DataError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(DataError):
    """Model/dataset configuration rejected (e.g. input not a multiple of 16)."""


class FormatError(DataError):
    """A serialized artifact (weight file, fixture, image) failed to parse."""


class NumericError(EngineError):
    """A numeric invariant broke: NaN/Inf activations, non-finite gradients,
    negative variance under the eps guard."""
