"""Sparse inference with spontaneous-neuron compensation on a toy transformer."""

__version__ = "0.1.0"
