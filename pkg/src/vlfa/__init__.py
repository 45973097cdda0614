"""Pose refinement by conditional diffusion with keypoint and text feedback."""

__version__ = "0.1.0"
