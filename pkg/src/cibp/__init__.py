"""Certified-robust training with interval bound propagation and a per-layer width penalty."""

__version__ = "0.1.0"
