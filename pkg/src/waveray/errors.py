"""Exception hierarchy for the library.

Everything raised on purpose derives from :class:`WaverayError`, so callers
(and the CLI) can tell library failures apart from genuine programming
errors.
"""


class WaverayError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(WaverayError, ValueError):
    """Operand shapes are inconsistent with an operation's contract."""


class BroadcastError(ShapeError):
    """Two shapes cannot be broadcast together."""


class InvalidAxisError(WaverayError, ValueError):
    """An axis argument is out of range for the given tensor."""


class NonFiniteError(WaverayError, FloatingPointError):
    """A tensor contains NaN or Inf (raised only in debug mode)."""


class GraphError(WaverayError, RuntimeError):
    """The backward pass cannot run on the recorded graph."""


class NonScalarLossError(GraphError):
    """backward() was called on a tensor with more than one element."""


class DetachedGraphError(GraphError):
    """The loss tensor was not produced on the given tape."""


class ConfigError(WaverayError, ValueError):
    """Invalid model, training or CLI configuration."""


class DataError(WaverayError, ValueError):
    """Dataset, manifest or image decoding problem."""


class CheckpointError(WaverayError, ValueError):
    """Malformed, corrupted or incompatible checkpoint file."""


class DivergenceError(WaverayError, RuntimeError):
    """Training produced a non-finite loss."""
