"""varfilt - variational and H∞ sequential filters for linear-Gaussian parameter estimation."""

__version__ = "0.1.0"
