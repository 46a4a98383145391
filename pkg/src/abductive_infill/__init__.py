"""Abductive text infilling: supervised and unsupervised hypothesis generation on a toy LM."""

__version__ = "0.1.0"
