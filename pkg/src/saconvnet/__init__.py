"""Self-attention-augmented ConvNet for extreme-precipitation day classification."""

__version__ = "0.1.0"
