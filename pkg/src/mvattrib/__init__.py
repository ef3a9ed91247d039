"""Counterfactual attribution of on-site search through generated alternative timelines."""

__version__ = "0.1.0"
