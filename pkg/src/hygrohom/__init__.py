"""Two-phase heat/moisture transport with hydration memory and its homogenised limit."""

__version__ = "0.1.0"

from .errors import (AssemblyError, AssumptionViolation, ConfigurationError, ExtrapolationError,  # noqa: E402
                     HygrohomError, OutputError, PecletError, SolverError, StepFailure)
from .materials import (KirchhoffMap, MaterialLaws, PhysicalConstants, default_laws,  # noqa: E402
                        validate_assumptions)
from .microstructure import CellRaster, MesoTiling, UnitCellGeometry, rasterize, volume_fraction  # noqa: E402

__all__ = [
    "AssemblyError", "AssumptionViolation", "ConfigurationError", "ExtrapolationError", "HygrohomError",
    "OutputError", "PecletError", "SolverError", "StepFailure", "KirchhoffMap", "MaterialLaws",
    "PhysicalConstants", "default_laws", "validate_assumptions", "CellRaster", "MesoTiling",
    "UnitCellGeometry", "rasterize", "volume_fraction",
]
