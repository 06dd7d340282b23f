"""Self-supervised cross-modal super-resolution for misaligned image pairs."""

__version__ = "0.1.0"
