"""Collapse dynamics on directed interaction graphs: simulation and asymptotics."""

__version__ = "0.1.0"
