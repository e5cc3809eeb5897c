"""Learned pseudo-distance verification: training, scoring and audits."""

__version__ = "0.1.0"
