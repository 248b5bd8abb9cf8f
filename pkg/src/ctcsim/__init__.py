"""Feedback Bloch-equation dynamics and continuous-time-crystal analysis."""

from importlib.metadata import PackageNotFoundError, version

from .model import DimensionlessParams, PhysicalParams, SpinState, jacobian, nondimensionalize, rhs

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

__all__ = [
    "DimensionlessParams",
    "PhysicalParams",
    "SpinState",
    "jacobian",
    "nondimensionalize",
    "rhs",
    "__version__",
]
