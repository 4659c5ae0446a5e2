"""Exception hierarchy shared by all modules.

Every error carries the name of the module that raised it so the CLI can
print module-tagged diagnostics.
"""


class BikvilError(Exception):
    module = "bikvil"

    def __init__(self, message: str, module: str | None = None):
        super().__init__(message)
        if module is not None:
            self.module = module

    def tagged(self) -> str:
        return f"[{self.module}] {self}"


class SchemaError(BikvilError):
    """Structural problem in input data (shapes, missing fields, mismatched T)."""


class DataError(BikvilError):
    """Numerically invalid data (NaN/Inf, too few points)."""


class PreconditionError(BikvilError):
    """An operation was called with inputs violating its precondition."""


class GeometryError(BikvilError):
    """Degenerate geometry: collinear neighbourhoods, failed registrations."""


class SimulationError(BikvilError):
    """Non-finite simulator state or invalid integration settings."""


class ConfigError(BikvilError):
    """Unknown or out-of-range configuration values."""
