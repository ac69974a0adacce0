"""MixTSQL Analyst: mixed-valued bivariate time series quasi-likelihood models."""

__version__ = "1.0.0"
