"""Desk-scale shared-expert-pool MoE laboratory."""

__version__ = "0.1.0"
