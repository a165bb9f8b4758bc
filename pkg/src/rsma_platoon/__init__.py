"""Joint rate-splitting downlink design and platoon control for federated learning over vehicle platoons."""
from .errors import PlatoonError

__version__ = "0.1.0"

__all__ = ["PlatoonError", "__version__"]
