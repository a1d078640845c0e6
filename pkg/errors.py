"""Exception hierarchy shared by every varirate module."""


class VarirateError(Exception):
    """Base class for toolkit errors."""


class DimensionError(VarirateError, ValueError):
    """Array shapes do not match what the operation expects."""


class NormalizationError(VarirateError, ValueError):
    """Normalization statistics are degenerate (zero dynamic range)."""


class DatasetFormatError(VarirateError, ValueError):
    """A dataset file has a bad header, unknown version or truncated body."""


class CheckpointError(VarirateError, ValueError):
    """A checkpoint file cannot be read or does not match the network."""


class ForwardCacheError(VarirateError, RuntimeError):
    """backward() was called without a preceding training-mode forward()."""


class NumericalError(VarirateError, ArithmeticError):
    """Non-finite losses or gradients."""


class CodewordLengthError(VarirateError, ValueError):
    """A kept codeword length lies outside {0, ..., M}."""


class QuantizerMismatchError(VarirateError, ValueError):
    """backward() was called with a spec other than the one used in forward()."""


class BitstreamError(VarirateError, ValueError):
    """A packed symbol stream is truncated or holds out-of-range symbols."""


class EmptyInputError(VarirateError, ValueError):
    """An operation received an empty batch, stream or dataset."""


class AuxiliaryInputError(VarirateError, ValueError):
    """A network needing the uplink magnitude was called without it."""
