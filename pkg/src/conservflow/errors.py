"""Exception types shared across the solvers."""


class ConfigurationError(ValueError):
    """Invalid user configuration (bad sizes, unknown names, missing files)."""


class ModelError(ValueError):
    """Physically inadmissible model data, e.g. a non-positive mobility."""


class StateError(ValueError):
    """A state left its admissible range (saturation outside [0, 1])."""


class SolverError(RuntimeError):
    """Linear solve failed or did not reach the requested residual."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class RankDeficiencyError(SolverError):
    """Constraint rows are linearly dependent."""

    def __init__(self, message, rows):
        super().__init__(message, {"rows": list(rows)})
        self.rows = list(rows)


class CFLError(RuntimeError):
    """Time step too large for the transport scheme."""


class NumericalFailure(FloatingPointError):
    """Non-finite value produced by a transport step."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class SingularRatioError(ZeroDivisionError):
    """Edge ratio f(u)/u requested at u = 0 for a flux with f(0) != 0."""
