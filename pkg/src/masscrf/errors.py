"""Exception types raised across the package."""


class MassCrfError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(MassCrfError, ValueError):
    pass


class NonFinite(MassCrfError, FloatingPointError):
    pass


class OddSpatialDim(MassCrfError, ValueError):
    pass


class NotScalar(MassCrfError, ValueError):
    pass


class TapeConsumed(MassCrfError, RuntimeError):
    """Backward was requested through a graph whose saved state was already freed."""


class BadParam(MassCrfError, ValueError):
    pass


class EmptyImage(MassCrfError, ValueError):
    pass


class DegenerateRange(MassCrfError, ValueError):
    pass


class NotTrainSplit(MassCrfError, ValueError):
    pass


class EmptyDataset(MassCrfError, ValueError):
    pass


class MissingPair(MassCrfError, FileNotFoundError):
    pass


class UnreadableFile(MassCrfError, OSError):
    pass


class NonBinaryMask(MassCrfError, ValueError):
    pass


class LengthMismatch(MassCrfError, ValueError):
    pass


class FieldTooLarge(MassCrfError, ValueError):
    pass


class DegenerateGradient(MassCrfError, ArithmeticError):
    """Input gradient norm is too small to define a perturbation direction."""


class VariantMismatch(MassCrfError, ValueError):
    pass


class NoDiscordantPairs(MassCrfError, ValueError):
    pass


class ConfigError(MassCrfError, ValueError):
    pass
