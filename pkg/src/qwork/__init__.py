"""Work extraction from quantum systems with thermal baths and an explicit weight."""

from .errors import (
    DimensionCapExceeded,
    DimensionMismatch,
    DivergentError,
    DomainError,
    IncompatibleDecomposition,
    InvalidState,
    NotUnitary,
    OffLatticeShift,
    QWorkError,
    WeightWindowTooSmall,
)
from .thermo import ThermalContext

__version__ = "0.1.0"

__all__ = [
    "DimensionCapExceeded",
    "DimensionMismatch",
    "DivergentError",
    "DomainError",
    "IncompatibleDecomposition",
    "InvalidState",
    "NotUnitary",
    "OffLatticeShift",
    "QWorkError",
    "ThermalContext",
    "WeightWindowTooSmall",
]
