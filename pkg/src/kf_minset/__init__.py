"""Keyframe sampling by minimal subsets, with loop closure and pose-graph back end."""

__version__ = "0.1.0"
