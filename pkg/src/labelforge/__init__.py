"""labelforge: a desk-scale laboratory for label-regularization training."""

__version__ = "0.1.0"
