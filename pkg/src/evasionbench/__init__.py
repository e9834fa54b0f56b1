"""Adversarial robustness benchmarking for synthetic-image detectors."""

__version__ = "0.1.0"
