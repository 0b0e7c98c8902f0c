"""Exception hierarchy.

Each class maps onto one CLI exit code so the frontend can translate
failures without inspecting messages.
"""


class QMAttackError(Exception):
    exit_code = 1


class FormatError(QMAttackError, ValueError):
    """Malformed image file or model text."""

    exit_code = 3


class ShapeError(QMAttackError, ValueError):
    """Operands with incompatible dimensions, or an image too small for an op."""

    exit_code = 3


class DatasetError(QMAttackError, OSError):
    exit_code = 2


class ConfigError(QMAttackError, ValueError):
    """Invalid or contradictory user configuration."""

    exit_code = 4


class NumericError(QMAttackError, ArithmeticError):
    """Non-finite values or unguarded singular operations."""

    exit_code = 5
