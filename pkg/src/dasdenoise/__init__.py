"""Unsupervised denoising of distributed acoustic sensing (DAS) records with
a dense multi-branch UNet (CP-UNet), plus the elastic-wave synthetic
benchmark, noise models, baselines and metrics used to evaluate it."""

__version__ = "0.1.0"
