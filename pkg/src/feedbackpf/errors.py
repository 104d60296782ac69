"""Exception and warning types shared across the toolkit."""


class FilteringError(Exception):
    """Base class for every error raised by feedbackpf."""


class ModelError(FilteringError, ValueError):
    """Invalid model definition (shapes, rank, non-finite probes)."""


class SingularGeometryError(FilteringError, ValueError):
    """Target coincides with a bearing sensor."""


class NumericalError(FilteringError):
    """A computation produced non-finite values or lost stability.

    ``step`` and ``context`` are filled in when known so the harness can
    report where a run failed.
    """

    def __init__(self, message, step=None, context=None):
        super().__init__(message)
        self.step = step
        self.context = context


class BlowUpError(NumericalError):
    pass


class StabilityError(NumericalError):
    pass


class CFLError(StabilityError, ValueError):
    def __init__(self, message, suggested_dt=None):
        super().__init__(message)
        self.suggested_dt = suggested_dt


class GainError(NumericalError, ValueError):
    pass


class ConfigError(FilteringError, ValueError):
    """Config could not be parsed or failed schema validation.

    ``field`` is the dotted path of the offending entry, e.g. ``time.dt``.
    """

    def __init__(self, message, field=None, line=None):
        prefix = f"{field}: " if field else ""
        suffix = f" (line {line})" if line is not None else ""
        super().__init__(f"{prefix}{message}{suffix}")
        self.field = field
        self.line = line


class GalerkinDegeneracyWarning(UserWarning):
    """The Galerkin matrix was singular and a ridge shift was applied.

    ``empty_cells`` holds zero-based indices of partition cells that
    received no particle mass.
    """

    def __init__(self, message, empty_cells=()):
        super().__init__(message)
        self.empty_cells = tuple(empty_cells)


class ExtrapolationWarning(UserWarning):
    """A finite-difference stencil reached outside a gain's grid support."""
