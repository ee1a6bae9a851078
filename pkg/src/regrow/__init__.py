"""Post-fire vegetation recovery forecasting pipeline."""

__version__ = "0.1.0"
