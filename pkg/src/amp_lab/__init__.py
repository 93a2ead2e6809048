"""Approximate message passing with state evolution and finite-sample checks."""

__version__ = "0.1.0"
