"""Exception hierarchy. The CLI maps each class to its own exit code."""


class VSRError(Exception):
    exit_code = 1


class ConfigError(VSRError, ValueError):
    """Invalid or inconsistent configuration (unknown enum, missing dataset, bad ranges)."""

    exit_code = 2


class ContractError(VSRError, ValueError):
    """A caller violated an operation's precondition (shapes, geometry, timesteps)."""

    exit_code = 3


class NumericError(VSRError, ArithmeticError):
    """Non-finite values where finite ones are required."""

    exit_code = 4
