"""Exception types shared across the package."""


class GraphSHError(Exception):
    """Base class for all package errors."""


class ShapeError(GraphSHError, ValueError):
    pass


class ValidationError(GraphSHError, ValueError):
    pass


class ContractError(GraphSHError, ValueError):
    pass


class ConfigError(GraphSHError, ValueError):
    pass


class InsufficientStatisticsError(GraphSHError, ValueError):
    pass


class FormatError(GraphSHError, ValueError):
    """A file does not follow its binary or text format."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class CorruptionError(FormatError):
    """Truncated stream or inconsistent length fields."""


class NonFiniteDataError(FormatError):
    pass


class SkeletonMismatchError(FormatError):
    pass


class NonFiniteGradientError(GraphSHError, FloatingPointError):
    def __init__(self, name: str, detail: str = ""):
        self.name = name
        msg = f"non-finite gradient for parameter {name!r}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class TrainingDivergedError(GraphSHError, FloatingPointError):
    pass
