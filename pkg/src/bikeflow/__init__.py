"""Station-level bike flow forecasting with fused multi-graph convolution and MC-dropout intervals."""

from .errors import BikeflowError, ConfigError, DataError, DivergenceError, SchemaError

__version__ = "0.1.0"

__all__ = ["BikeflowError", "ConfigError", "DataError", "DivergenceError", "SchemaError", "__version__"]
