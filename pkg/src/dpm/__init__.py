"""Dynamic prototype masking for occlusion-robust embedding learning."""

__version__ = "0.1.0"
