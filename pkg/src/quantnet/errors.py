"""Exception hierarchy. The CLI maps these onto distinct exit codes."""


class QuantnetError(Exception):
    """Base class for everything raised deliberately by this package."""


class ConfigError(QuantnetError):
    """Bad run configuration: unknown keys, wrong types, unresolvable refs."""


class DataError(QuantnetError):
    """Dataset generation/loading problems (malformed rows, bad splits)."""


class DimensionError(QuantnetError):
    """Shape mismatch in a tensor op; message names the offending axes."""


class UsageError(QuantnetError):
    """API misuse: non-scalar loss, uninitialized quantizer, wrong mode."""


class StructureError(QuantnetError):
    """Network graph violates a structural requirement for a transform."""


class DivergenceError(QuantnetError):
    """Training aborted (non-finite loss or accuracy floor violation)."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


class CompileError(QuantnetError):
    """Integer compilation failed (accumulator width, missing scales...)."""


class EquivalenceError(QuantnetError):
    """Compiled integer model disagrees with its source network."""
