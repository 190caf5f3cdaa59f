"""Reduced-order 4D-Var with a POD basis and an LSTM surrogate."""

__version__ = "0.1.0"
