"""alignlab: attention-alignment training with fairness-gap auditing on a
synthetic shortcut benchmark."""

from ._backend import BACKEND_NAME, get_backend

__all__ = ["BACKEND_NAME", "get_backend"]
__version__ = "0.1.0"
