"""Exception hierarchy shared by all modules."""


class MFGLabError(Exception):
    """Base class for library errors."""


class ConfigError(MFGLabError, ValueError):
    """Invalid or missing configuration value."""


class ShapeError(MFGLabError, ValueError):
    """Array or network dimensions do not fit the operation."""


class DomainError(MFGLabError, ValueError):
    """Argument outside the mathematical domain of the operation."""


class UnsupportedActivationError(MFGLabError, ValueError):
    """Activation lacks the smoothness needed for the requested derivative order."""


class UnsupportedGraphError(MFGLabError, TypeError):
    """Loss uses operations the differentiation engine cannot trace."""


class UnsupportedError(MFGLabError, NotImplementedError):
    """Operation is not defined for this kind of object (e.g. score of a checkerboard)."""


class DivergedSimulationError(MFGLabError, FloatingPointError):
    """A trajectory produced non-finite states."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DivergedTrainingError(MFGLabError, FloatingPointError):
    """Training produced a non-finite loss; carries the last finite checkpoint."""

    def __init__(self, message, step=None, checkpoint=None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


class GridResolutionError(MFGLabError, ValueError):
    """PDE solve produced spurious negative densities; refine the grid."""


class IllPosedHamiltonianError(MFGLabError, ArithmeticError):
    """The supremum defining the Hamiltonian is unbounded."""
