"""Transition densities of stable-like Markov processes by the parametrix method."""

__version__ = "0.1.0"
