"""Content- and computation-aware stream replication for edge video analytics."""

from edgecast.errors import EdgecastError

__version__ = "0.1.0"

__all__ = ["EdgecastError", "__version__"]
