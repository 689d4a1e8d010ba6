"""Adversarial attacks and circle-loss adversarial training for small signal classifiers."""

__version__ = "0.1.0"
