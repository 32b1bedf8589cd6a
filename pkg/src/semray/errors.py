"""Exception types shared across the package."""


class SemrayError(Exception):
    """Base class for all package-specific failures."""


class ShapeError(SemrayError, ValueError):
    """Operand shapes violate an operation's contract."""


class ConfigError(SemrayError, ValueError):
    """A configuration value is invalid or inconsistent."""


class DataError(SemrayError, ValueError):
    """Dataset contents violate their contract (bad labels, paths, ...)."""


class GeometryError(SemrayError, ValueError):
    """Degenerate geometric input (coincident points, pixel off-image, ...)."""


class ContractError(SemrayError, ValueError):
    """An operation was invoked outside its stated pre-conditions."""


class GradCheckError(SemrayError, RuntimeError):
    """A gradient check could not be carried out (e.g. non-deterministic f)."""


class TrainingAborted(SemrayError, RuntimeError):
    """Training stopped on a non-finite loss; carries a diagnostic path."""
