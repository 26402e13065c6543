"""Reward-aware proto-representations for tabular reinforcement learning."""

__version__ = "0.1.0"
