"""E(3)-equivariant conditional VAE for 3D molecular linker generation."""

__version__ = "0.1.0"
