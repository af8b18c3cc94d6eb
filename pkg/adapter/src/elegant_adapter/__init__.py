"""HTTP adapter exposing detection, completion, VQA, and embedding models
over the scene-graph engine's wire protocol."""

__version__ = "0.1.0"

from .config import AdapterConfig
from .service import AdapterServer, serve

__all__ = ["AdapterConfig", "AdapterServer", "serve", "__version__"]
