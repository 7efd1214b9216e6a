"""Gravity-model estimation and capacity-constrained enrollment simulation."""

__version__ = "0.1.0"
