"""Purpose-directed open-ended learning on a deterministic desk world."""

__version__ = "0.1.0"
