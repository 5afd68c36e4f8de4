"""Agent-based simulation of a dock-based bike-sharing district."""

__version__ = "0.1.0"
