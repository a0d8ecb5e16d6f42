"""Meta-policy gradient estimators and the ProMP optimiser on small tasks."""

__version__ = "0.1.0"
