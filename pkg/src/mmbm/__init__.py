"""Multi-motivation behaviour modelling."""

__version__ = "0.1.0"
