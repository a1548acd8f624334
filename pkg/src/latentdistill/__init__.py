"""Latent-code dataset distillation with a single-step conditional diffusion generator."""

__version__ = "0.1.0"
