"""Koopman car-following models and predictive control for mixed CAV/HDV platoons."""

__version__ = "0.1.0"
