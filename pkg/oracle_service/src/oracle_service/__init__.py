"""HTTP loss oracle over saved victim checkpoints."""

from .app import create_app
from .model import VictimModel

__version__ = "0.1.0"
__all__ = ["create_app", "VictimModel", "__version__"]
