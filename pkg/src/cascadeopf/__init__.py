"""Failure-probability constrained AC optimal power flow and cascade simulation."""

__version__ = "0.1.0"
