"""Closed-loop neural-operator observers of traffic density on a ring road."""

__version__ = "0.1.0"
