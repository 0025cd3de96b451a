"""Deterministic simulator for a hybrid batch / service compute platform."""

__version__ = "0.1.0"
