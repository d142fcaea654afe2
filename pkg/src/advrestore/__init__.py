"""Adversarial robustness lab for image restoration networks."""
__version__ = "0.1.0"
