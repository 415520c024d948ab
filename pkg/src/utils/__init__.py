"""Utility modules: storage and fingerprints."""
