"""Stochastic homogenization of the Poisson equation in randomly perforated domains."""

from .box import Box

__version__ = "0.1.0"

__all__ = ["Box", "__version__"]
