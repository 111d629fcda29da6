"""Deterministic simulator for a broker-matched, contract-settled IoT data marketplace."""

__version__ = "0.1.0"
