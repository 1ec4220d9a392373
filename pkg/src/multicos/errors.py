"""Error vocabulary shared across the package.

Everything derives from ValueError so callers can catch broadly; the concrete
types exist so tests and the CLI can tell failure classes apart. File-system
level failures use the builtin OSError rather than a custom wrapper.
"""


class ShapeMismatch(ValueError):
    """Operands cannot be broadcast / composed at the attempted shapes."""


class InvalidDimensions(ValueError):
    """A rank, extent, or size argument is invalid for the operation."""


class InvalidGroups(ValueError):
    """Channel counts are not divisible by the requested group count."""


class NonScalarLoss(ValueError):
    """backward() was called on a tensor that is not a scalar."""


class LengthMismatch(ValueError):
    """Sequence arguments disagree in length."""


class InvalidReduction(ValueError):
    """Unknown reduction kind."""


class NonPositiveDelta(ValueError):
    """Discretization step must be strictly positive."""


class DomainError(ValueError):
    """Input values fall outside the operation's documented domain."""


class MalformedHeader(ValueError):
    """A serialized tensor or checkpoint header failed validation."""


class MissingModality(ValueError):
    """An input modality required by the configuration was not provided."""


class ConfigError(ValueError):
    """Configuration values are inconsistent or out of range."""
