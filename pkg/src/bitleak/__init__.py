"""Post-training quantization and membership-inference laboratory."""

__version__ = "0.1.0"
