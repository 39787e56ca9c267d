"""Exception hierarchy. Each category maps to a CLI exit code."""


class LayerRiskError(Exception):
    exit_code = 1


class ConfigError(LayerRiskError):
    exit_code = 2


class FormatError(LayerRiskError):
    """Malformed dataset or checkpoint bytes."""

    exit_code = 3


class DimensionError(LayerRiskError, ValueError):
    exit_code = 4


class ContractError(LayerRiskError, ValueError):
    """A precondition of an operation was violated by the caller."""

    exit_code = 4


class NumericalError(LayerRiskError, ArithmeticError):
    exit_code = 5
