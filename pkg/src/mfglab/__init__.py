"""Mean-field-game formulations of generative models: score-based diffusion
with HJB regularizers, potential normalizing flows, Langevin gradient flows
and a grid-based verification suite."""

from .errors import (ConfigError, DivergedSimulationError, DivergedTrainingError, DomainError,
                     GridResolutionError, IllPosedHamiltonianError, MFGLabError, ShapeError,
                     UnsupportedActivationError, UnsupportedError, UnsupportedGraphError)

__all__ = [
    "ConfigError", "DivergedSimulationError", "DivergedTrainingError", "DomainError", "GridResolutionError",
    "IllPosedHamiltonianError", "MFGLabError", "ShapeError", "UnsupportedActivationError", "UnsupportedError",
    "UnsupportedGraphError",
]

__version__ = "0.1.0"
