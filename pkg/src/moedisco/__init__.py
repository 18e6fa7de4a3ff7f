"""Staged MoE training: decompose, cluster, train experts apart, merge, fine-tune."""

__version__ = "0.1.0"
