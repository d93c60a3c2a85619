"""Quenched limit theorems and linear response for random LSV maps, computed with Ulam operators."""

__version__ = "0.1.0"
