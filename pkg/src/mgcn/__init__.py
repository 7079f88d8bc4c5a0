"""Multigraph convolutional networks on multiscale superpixel graphs."""

__version__ = "0.1.0"
