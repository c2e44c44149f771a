"""Exception hierarchy shared by the fitting modules and the CLI."""


class PanelGLMMError(Exception):
    """Base class for all package errors."""


class DimensionError(PanelGLMMError, ValueError):
    """Inputs with inconsistent shapes or an invalid panel layout."""


class StationarityError(PanelGLMMError, ValueError):
    """AR(1) coefficient outside the admissible stationary range."""


class LinearizationError(PanelGLMMError, FloatingPointError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class ConditioningError(PanelGLMMError, ArithmeticError):
    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class SingularSystemError(PanelGLMMError, ArithmeticError):
    """Penalized normal equations are singular (typically lambda=0 with collinear X)."""


class DegenerateFitError(PanelGLMMError, ArithmeticError):
    """Hat matrix trace reached n, GCV undefined."""


class SelectionError(PanelGLMMError, RuntimeError):
    """No admissible point on the penalty grid."""


class MStepError(PanelGLMMError, ArithmeticError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DivergenceError(PanelGLMMError, RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class RelevanceError(PanelGLMMError, ValueError):
    """Component with zero variance, correlations undefined."""


class SpecError(PanelGLMMError, ValueError):
    """Invalid simulation specification."""


class DataContractError(PanelGLMMError, ValueError):
    """Dataset file violates the balanced-panel CSV contract."""


class ConfigError(PanelGLMMError, ValueError):
    """Run configuration failed validation."""
