"""Encrypted-traffic flow detector with replay-based incremental learning."""
__version__ = "0.1.0"
