"""Exception hierarchy shared by all modules."""


class WalshError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(WalshError, ValueError):
    """Invalid parameters, shapes or seeds."""


class InvalidPointError(WalshError, ValueError):
    """A graph point that does not live on the given star graph."""


class InsufficientDataError(WalshError, ValueError):
    """Too few samples for the requested statistic."""


class PreconditionError(WalshError, ValueError):
    """An input violates an operation's precondition (e.g. f not in class D)."""


class ConsistencyError(WalshError, RuntimeError):
    """Internal invariant broken; indicates a bug rather than bad input."""
