"""tinylm: train, fine-tune, quantize and benchmark small decoder-only language models."""

__version__ = "0.1.0"
