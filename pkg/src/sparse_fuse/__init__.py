# Copyright 2026 sparse-fuse contributors

"""Recurrent sparse multi-view 3D perception with a fused aggregation operator."""

__version__ = "0.1.0"
