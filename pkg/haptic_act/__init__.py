"""Haptic-informed action chunking: a desk-scale simulation of force-aware imitation learning for seed transfer."""

__version__ = "0.1.0"
