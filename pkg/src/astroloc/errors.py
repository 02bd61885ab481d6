"""Exception hierarchy. Each family maps to its own CLI exit code."""


class AstroLocError(Exception):
    exit_code = 1


class FormatError(AstroLocError):
    """Malformed input file or record."""

    exit_code = 3


class PreconditionError(AstroLocError):
    """Inputs are well-formed but do not satisfy an operation's precondition."""

    exit_code = 4


class NumericError(AstroLocError):
    """NaN/Inf or other numeric breakdown."""

    exit_code = 5


class GeometryError(AstroLocError):
    """Invalid or degenerate geographic input."""

    exit_code = 6


class InvalidTileError(GeometryError):
    pass


class DegenerateGeometryError(GeometryError):
    pass


class InvalidBatchError(PreconditionError):
    pass


class InsufficientClusterError(PreconditionError):
    pass


class CannotFillBatchError(PreconditionError):
    pass


class MissingFootprintError(PreconditionError):
    pass
