"""Few-shot LoRA adaptation of a toy image-editing diffusion transformer for frame interpolation."""

__version__ = "0.1.0"
