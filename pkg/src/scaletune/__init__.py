"""Scale-only fine-tuning for weight-quantized toy diffusion models."""

__version__ = "0.1.0"
