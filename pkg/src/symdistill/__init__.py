"""Distill learned optimizers into symbolic update rules, measure them, and meta-tune the result."""

__version__ = "0.1.0"
