"""Spatial distillation based distribution alignment (SDDA) for cross-headset EEG transfer."""

__version__ = "0.1.0"
