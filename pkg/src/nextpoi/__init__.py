"""Next point-of-interest recommendation with latent behaviour patterns."""

__version__ = "0.1.0"
