"""Divergence-driven multi-fidelity active learning for crystal
stability screening."""

__version__ = "0.1.0"
