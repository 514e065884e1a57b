"""Skeleton-based gait recognition with residual spatio-temporal graph networks."""

__version__ = "0.1.0"
