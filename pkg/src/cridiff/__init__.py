"""Diffusion-based prostate segmentation with boundary/core feature conditioners.

Phantom-scale implementation: DDPM core, distance-transform label decoupling,
triangular boundary/core conditioner grids, crisscross feature injection into
a ResUNet denoiser, segmentation metrics, and a reproducible CLI harness.
"""

__version__ = "0.1.0"
