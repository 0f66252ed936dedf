"""Semi-supervised scene classification for RGB and multispectral imagery."""

__version__ = "0.1.0"
