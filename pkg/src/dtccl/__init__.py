"""Disengagement-triggered contrastive continual learning for a desk-scale driving planner."""

__version__ = "0.1.0"
