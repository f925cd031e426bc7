"""Spatial binary classification: latent probit models on lattices and the classifiers they are compared against."""

__version__ = "0.1.0"
