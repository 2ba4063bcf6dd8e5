"""Template-conditioned query detection and tracking-by-query on synthetic shapes."""

from .geometry import Box
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["Box", "BACKEND", "__version__"]
