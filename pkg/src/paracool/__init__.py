"""Continuous parametric feedback cooling of a trapped atom in a cavity."""

__version__ = "0.1.0"
