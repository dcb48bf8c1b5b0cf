"""Transformer interatomic potentials with learned rotation equivariance."""

__version__ = "0.1.0"
