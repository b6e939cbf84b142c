"""Two-stage semi-supervised 2D segmentation lab with a self-distillation
theory verifier."""

__version__ = "0.1.0"
