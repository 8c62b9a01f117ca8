"""Guideline-conditioned feature distillation into volumetric scoring networks."""

__version__ = "0.1.0"
