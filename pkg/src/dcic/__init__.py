"""dcic: learned image compression plus inference on the quantized representation."""

__version__ = "0.1.0"
