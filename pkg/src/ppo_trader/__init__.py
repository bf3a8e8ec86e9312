"""Forecasting and reinforcement-learning toolkit for single-asset trading."""

__version__ = "0.1.0"
