"""Exception types raised by the simulation library."""


class IrsError(Exception):
    """Base class for library errors."""


class EstimationError(IrsError, ValueError):
    """An estimator could not produce a usable result."""


class DegenerateGeometryError(EstimationError):
    """Trajectory parameters are not identifiable from the given track."""


class SingularMatrixError(IrsError, ValueError):
    """A training reflection matrix does not satisfy the rank condition."""


class ConfigError(IrsError, ValueError):
    """Invalid scenario or experiment configuration."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = []
        if path:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{': '.join(where)}: " if where else ""
        super().__init__(prefix + message)
