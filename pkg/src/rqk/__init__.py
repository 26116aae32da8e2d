"""Fast algebra for restricted quasi-Kronecker covariance matrices."""

__version__ = "0.1.0"
