"""Simulated DRAM fingerprints and a numpy CNN for device identification."""

__version__ = "0.1.0"
