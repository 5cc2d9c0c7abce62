"""Length generalisation in arithmetic transformers: data formats, reference
carry algorithms, positional-encoding schemes, a toy numpy transformer and a
linear-attention theory simulator."""

__version__ = "0.1.0"
