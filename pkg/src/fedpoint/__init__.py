"""fedpoint: a desk-scale federated point-transformer training simulator.

Synthetic point-cloud "slides" stand in for whole-slide-image feature sets;
a numpy-backed reverse-mode tensor engine trains the vector-attention
point transformer (with farthest cosine sampling and dynamic distribution
adjustment) across simulated sites under federated averaging.
"""

from . import autodiff, config, coverage, datasynth, federation, model, sampling, seeding

__all__ = [
    "autodiff",
    "config",
    "coverage",
    "datasynth",
    "federation",
    "model",
    "sampling",
    "seeding",
]
