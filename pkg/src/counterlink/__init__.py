"""Counterfactual subgraph generation for link prediction under structural shift."""

__version__ = "0.1.0"
