"""Markov-chain filtering of Java deserialization streams by class features."""

__version__ = "0.1.0"
