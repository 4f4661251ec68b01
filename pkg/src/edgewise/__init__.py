"""Multi-bit quantization, nested sparse subnets and partial model updates for a small MLP."""

__version__ = "0.1.0"
