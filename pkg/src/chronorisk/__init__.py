"""Forecasting chronic-disease onset from multi-source longitudinal health records."""

__version__ = "0.1.0"
