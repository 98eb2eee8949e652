"""Exception types raised across the toolkit.

The CLI maps the three families to exit codes: :class:`ConfigError` -> 2,
:class:`DataError` -> 3, :class:`NumericError` -> 4.
"""


class StprotError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(StprotError, ValueError):
    """Invalid configuration or usage."""


class DataError(StprotError, ValueError):
    """Input data is malformed or inconsistent."""


class NumericError(StprotError, ArithmeticError):
    """A numerical procedure failed or produced non-finite values."""


class ParseError(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class DuplicateId(DataError):
    pass


class EmptyRow(DataError):
    pass


class GeneMissing(DataError):
    def __init__(self, missing):
        self.missing = list(missing)
        shown = ", ".join(self.missing[:20])
        more = "" if len(self.missing) <= 20 else f" (+{len(self.missing) - 20} more)"
        super().__init__(f"{len(self.missing)} required gene(s) absent: {shown}{more}")


class ProteinMissing(ConfigError):
    """Training needs a protein table but none was supplied."""


class ShapeMismatch(DataError):
    pass


class LengthMismatch(DataError):
    pass


class AlphaMismatch(ShapeMismatch):
    pass


class ChecksumError(DataError):
    pass


class ManifestError(DataError):
    pass


class KTooLarge(ConfigError):
    pass


class NothingToEvaluate(ConfigError):
    pass


class NonFiniteActivation(NumericError):
    pass


class NonFiniteGradient(NumericError):
    pass


class RankDeficient(NumericError):
    pass


class DegenerateCluster(NumericError):
    pass
