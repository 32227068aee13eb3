"""Spiking Siamese multi-object tracking for event cameras."""

__version__ = "0.1.0"
