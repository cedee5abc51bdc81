"""Masked discrete diffusion language modelling with selective-scan, attention and hybrid denoisers."""

__version__ = "0.1.0"
