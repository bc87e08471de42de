"""Spherically symmetric Vlasov-Poisson runs with a fixed positive background."""

__version__ = "0.1.0"
