"""Exception hierarchy shared by all mixsep modules."""


class MixsepError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(MixsepError):
    """Caller handed over data that violates an operation's contract."""


class NumericalError(MixsepError):
    """A numeric routine failed beyond the built-in rescue paths."""


class ConfigurationError(MixsepError):
    """A configuration value or combination of values is not usable."""
