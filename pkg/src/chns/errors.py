"""Exception hierarchy shared across the package."""


class ChnsError(Exception):
    """Base class for all package errors."""


class ConfigError(ChnsError):
    """Invalid configuration: bad config file, unsupported parameter combination."""


class ContractError(ChnsError):
    """An operation was called with inputs violating its contract (size mismatch,
    unbalanced tree where a balanced one is required, ...)."""


class SolveError(ChnsError):
    """A linear or nonlinear solver failed to converge.

    Attributes
    ----------
    block : str or None
        Which solver block failed (e.g. "ch", "momentum", "pp", "vupdate").
    history : list of float
        Residual history, when available.
    """

    def __init__(self, message, block=None, history=None):
        super().__init__(message)
        self.block = block
        self.history = history or []
