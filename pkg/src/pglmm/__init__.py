"""Penalized generalized linear mixed models for longitudinal genetic association."""

__version__ = "0.1.0"
