"""physflow: physics-constrained generative modeling of 1-D time series."""

__version__ = "0.1.0"
