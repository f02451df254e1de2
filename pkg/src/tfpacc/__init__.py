"""Weather response of agricultural TFP growth and counterfactual climate impacts."""

__version__ = "0.1.0"

from tfpacc.errors import (
    ConfigError,
    DataValidationError,
    DomainError,
    NumericalError,
    RankDeficiencyError,
)

__all__ = [
    "ConfigError",
    "DataValidationError",
    "DomainError",
    "NumericalError",
    "RankDeficiencyError",
]
