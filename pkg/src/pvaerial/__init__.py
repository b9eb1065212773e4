"""Post-processing toolkit for UAV imagery of PV plants."""

__version__ = "0.1.0"
