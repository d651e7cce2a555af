"""Location-conditioned monocular depth estimation with a paired conditional VAE."""
__version__ = "0.1.0"
