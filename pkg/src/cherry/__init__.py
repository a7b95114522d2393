"""IFD-based cherry-data selection for instruction tuning."""

__version__ = "0.1.0"

from .errors import BackendError, CherryError, ConfigError, DataError

__all__ = ["BackendError", "CherryError", "ConfigError", "DataError", "__version__"]
