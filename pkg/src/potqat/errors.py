"""Exception types shared across the package."""


class PotQatError(Exception):
    """Base class; the CLI maps these to exit code 1."""


class DimensionError(PotQatError, ValueError):
    pass


class ContractError(PotQatError, RuntimeError):
    pass


class SpecError(PotQatError, ValueError):
    pass


class FormatError(PotQatError, ValueError):
    """Malformed packed codes or checkpoint bytes."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(PotQatError, ValueError):
    pass


class DataError(PotQatError, ValueError):
    pass


class StateError(PotQatError, RuntimeError):
    pass


class CalibrationError(PotQatError, RuntimeError):
    pass


class NumericalError(PotQatError, FloatingPointError):
    pass
