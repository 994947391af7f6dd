"""Origin-destination flow prediction with learned relative-location encodings."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
