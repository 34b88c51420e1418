"""Minimal deterministic CNN training engine (dense float64 tensors)."""
