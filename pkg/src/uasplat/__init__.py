"""Uncertainty-aware articulated Gaussian splatting, CPU-only and fully
differentiable by hand: dual-pass (color + uncertainty) rasterization, a
probabilistic deformation MLP, linear blend skinning, and MAP training with
confidence-aware regularizers on procedurally generated occluded sequences.
"""

__version__ = "0.1.0"
