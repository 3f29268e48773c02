"""Mixup-based spray morphology classification on a from-scratch numpy CNN."""

__version__ = "0.1.0"
