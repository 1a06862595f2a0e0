"""Desk-scale testbed for semantic watermarking of latent diffusion models.

Implements the full pipeline: variance schedule, an analytically
differentiable mixture diffusion model with a deterministic sampler and its
inverse, a linear image codec, three initial-noise watermark schemes with
calibrated detection, gradient imprint attacks, the progressive guided
inversion-denoising defense, evaluation metrics, and a reproducible
experiment harness.
"""

from . import attacks, codec, diffusion, harness, metrics, pgid, schedule, tensorgrad, watermarks

__all__ = [
    "attacks",
    "codec",
    "diffusion",
    "harness",
    "metrics",
    "pgid",
    "schedule",
    "tensorgrad",
    "watermarks",
]

__version__ = "0.1.0"
