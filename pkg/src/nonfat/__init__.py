"""Nonparametric factor-trajectory learning for dynamic tensor decomposition."""
