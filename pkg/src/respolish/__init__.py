"""Two-stage image inpainting: a coarse painter fills the hole, a fine painter polishes it."""

__version__ = "0.1.0"
