"""Sparse-coding frontend defense and adaptive attack evaluation harness."""

from . import attacks, autodiff, dictlearn, frontend, harness, model, patches, serialize

__version__ = "0.1.0"

__all__ = [
    "attacks",
    "autodiff",
    "dictlearn",
    "frontend",
    "harness",
    "model",
    "patches",
    "serialize",
]
