"""Lingflow: tool-use trace tooling for document visual question answering."""

from lingflow.errors import ConfigError, DataError, LingflowError, TransportError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "LingflowError", "TransportError", "__version__"]
