"""Approximate control variate estimators with automated low-fidelity model tuning."""

__version__ = "0.1.0"
