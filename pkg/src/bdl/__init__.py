"""Pedestrian detection with a small convolutional network trained by backprop with boosting-like sample penalties."""

__version__ = "0.1.0"
