"""Desk-scale weakly-supervised object localization on a numpy autodiff engine."""

__version__ = "0.1.0"
