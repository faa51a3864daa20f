"""Feature caching for U-Net diffusion sampling, at desk scale."""

__version__ = "0.1.0"
