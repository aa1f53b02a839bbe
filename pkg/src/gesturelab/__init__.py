"""Audio-driven gesture generation with a split-latent conditional VAE."""

__version__ = "0.1.0"
