"""Intrinsic task-specific subspaces: discover them from fine-tuning
trajectories, train inside them and analyse what they learn."""

__version__ = "0.1.0"
