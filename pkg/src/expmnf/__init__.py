"""Differentially private training via exponential-mechanism sampling with
normalizing flows, alongside a DPSGD baseline and evaluation harness."""

__version__ = "0.1.0"
