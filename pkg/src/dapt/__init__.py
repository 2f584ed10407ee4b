"""Dual-alignment prompt tuning on frozen encoders, with domain-discrepancy
diagnostics and a reproducible CLI."""

__version__ = "0.1.0"

from . import autodiff, conditional, datagen, diagnostics, marginal, model, training

__all__ = [
    "autodiff",
    "conditional",
    "datagen",
    "diagnostics",
    "marginal",
    "model",
    "training",
    "__version__",
]
