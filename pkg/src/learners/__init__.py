"""Hebbian layers, the plasticity ledger and classifier heads."""
