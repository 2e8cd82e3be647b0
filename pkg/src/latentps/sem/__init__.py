"""Structural equation models: the joint model, measurement-only and all-linear variants."""
