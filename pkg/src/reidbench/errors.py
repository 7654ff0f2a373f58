"""Exception types shared across the package.

Config/usage mistakes subclass ValueError; failures discovered at run time
(missing state, unusable data) subclass RuntimeError. The CLI maps the
former to exit code 1 and the latter to exit code 2.
"""


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class ParameterError(ValueError):
    """A hyperparameter or argument is outside its valid range."""


class DegenerateInputError(ValueError):
    """Input is numerically degenerate (e.g. zero-norm row under cosine)."""


class LabelError(ValueError):
    """A class label is outside the valid range."""


class BatchCompositionError(ValueError):
    """A mining batch lacks a positive or negative for some anchor."""


class NumericError(RuntimeError):
    """A computation produced or encountered non-finite values."""


class ConfigError(ValueError):
    """A config file or override could not be parsed or validated."""


class StateError(RuntimeError):
    """An operation was called before required state was populated."""


class DatasetError(RuntimeError):
    """A dataset is missing, malformed, or unusable for the request."""


class EvaluationError(RuntimeError):
    """Retrieval evaluation could not produce a defined result."""
