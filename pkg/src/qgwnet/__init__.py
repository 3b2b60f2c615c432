"""Quantile Graph WaveNet: spatio-temporal quantile forecasting on sensor graphs."""

__version__ = "0.1.0"
