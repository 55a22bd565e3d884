"""Exception types shared across the engine."""


class NSSError(Exception):
    pass


class ConfigurationError(NSSError, ValueError):
    pass


class OracleError(NSSError):
    """An oracle could not produce a task loss for ``config``."""

    def __init__(self, message: str, config=None):
        super().__init__(message if config is None else f"{message} (config={config})")
        self.config = config


class ConfigNotFoundError(OracleError):
    pass


class OracleTransportError(OracleError):
    pass


class CapExhaustedError(NSSError):
    """No in-band sample within the draw cap; ``best`` is the closest config seen."""

    def __init__(self, message: str, best=None, best_deviation=None, draws=0):
        super().__init__(message)
        self.best = best
        self.best_deviation = best_deviation
        self.draws = draws
