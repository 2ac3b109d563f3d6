"""Adversarial robustness workbench for neural max-min-fair power control in D-MIMO."""

__version__ = "0.1.0"
