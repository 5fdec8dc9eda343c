"""Input-aware multi-level spiking Transformer kernels."""

__version__ = "0.1.0"
