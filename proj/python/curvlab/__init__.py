"""Python bindings for the curvlab C++ core."""

from ._curvlab import *  # noqa: F401,F403
from ._curvlab import __doc__  # noqa: F401

__all__ = [name for name in dir() if not name.startswith("_")]
