"""Cloud-model-improved transformer (CMIT) toolkit for daily load forecasting."""

__version__ = "0.1.0"
