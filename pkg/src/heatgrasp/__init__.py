"""Heatmap-driven 6-DoF grasp detection at desk scale."""

__version__ = "0.1.0"
