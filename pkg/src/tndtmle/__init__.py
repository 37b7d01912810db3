"""Targeted maximum likelihood estimation for test-negative designs with missing exposure."""
__version__ = "0.1.0"
