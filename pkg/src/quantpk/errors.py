"""Exception hierarchy shared across the package."""


class QuantPKError(Exception):
    """Base class for all package errors."""


class SchemaError(QuantPKError):
    """Dataset header is missing a required column."""

    def __init__(self, column: str):
        super().__init__(f"missing required column: {column}")
        self.column = column


class ParseError(QuantPKError):
    """A cell could not be parsed."""

    def __init__(self, line: int, column: str, value: str, reason: str = "not numeric"):
        super().__init__(f"line {line}, column {column}: {value!r} is {reason}")
        self.line = line
        self.column = column
        self.value = value


class EmptyDatasetError(QuantPKError):
    """Input contained no header line."""


class ValidationError(QuantPKError):
    """Records violate dataset invariants."""


class ParameterDomainError(QuantPKError):
    """Parameters left their admissible domain (non-finite or non-positive)."""


class GridRangeError(QuantPKError):
    """A dose time falls outside the dose-rate grid."""

    def __init__(self, time: float, t0: float, t_end: float):
        super().__init__(f"dose at t={time} outside grid [{t0}, {t_end}]")
        self.time = time


class SolverError(QuantPKError):
    """Base class for integration failures."""


class StiffnessError(SolverError):
    def __init__(self, t: float, h: float):
        super().__init__(f"step size underflow (h={h:.3e}) at t={t}")
        self.t = t
        self.h = h


class DivergenceError(SolverError):
    def __init__(self, last_good_time: float):
        super().__init__(f"non-finite state after t={last_good_time}")
        self.last_good_time = last_good_time


class ModelDegeneracyError(QuantPKError):
    """Prediction at or below the positivity floor of a residual model."""


class EstimationError(QuantPKError):
    """SAEM produced an unusable population update or too many failures."""


class SettingsError(QuantPKError):
    """Invalid run settings."""


class GateError(QuantPKError):
    """Gate references invalid qubit indices."""


class TruncationError(QuantPKError):
    """Amount exceeds the top Fock level of its register."""


class ConfigError(QuantPKError):
    """Configuration file could not be parsed or is inconsistent."""
