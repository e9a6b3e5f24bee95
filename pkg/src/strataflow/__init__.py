"""Conic stratified sets, transversality by flows, and Morse CW structures."""

from .errors import StrataflowError
from .tolerances import DEFAULT, Tolerances

__version__ = "0.1.0"

__all__ = ["DEFAULT", "StrataflowError", "Tolerances", "__version__"]
