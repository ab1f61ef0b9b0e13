"""Cluster-coverage experiment: farthest cosine vs farthest point sampling.

Each trial builds a cloud in which a small fraction of points form tight
spatial clusters with feature vectors shifted along the signal direction
(the regime positive slides exhibit), samples m points with both methods,
and records whether at least one signal point was kept.  Feature-space
sampling should cover the cluster almost always; position-space sampling
misses it much more often.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasynth import make_slide_points, signal_direction
from .sampling import farthest_cosine_sampling, farthest_point_sampling
from .seeding import rng_for


@dataclass(frozen=True)
class CoverageSetup:
    n_points: int = 256
    sample_size: int = 0  # 0 -> n_points // 4
    feature_dim: int = 64
    signal_fraction: float = 0.03
    cluster_spread: float = 0.02
    noise_scale: float = 0.3
    trials: int = 100
    seed: int = 0

    @property
    def m(self) -> int:
        return self.sample_size if self.sample_size else self.n_points // 4


def coverage_trial(setup: CoverageSetup, trial: int) -> tuple[bool, bool]:
    """(fcs covered, fps covered) for one seeded trial."""
    rng = rng_for(setup.seed, "coverage", trial)
    positions, features, n_signal = make_slide_points(
        rng, setup.n_points, setup.feature_dim, 1, setup.signal_fraction,
        setup.cluster_spread, setup.noise_scale,
        site_mean=np.zeros(setup.feature_dim),
        direction=signal_direction(setup.feature_dim),
    )
    fcs_idx = farthest_cosine_sampling(features, setup.m)
    fps_idx = farthest_point_sampling(positions, setup.m)
    return bool((fcs_idx < n_signal).any()), bool((fps_idx < n_signal).any())


def run_coverage(setup: CoverageSetup) -> tuple[list[tuple[int, int, int, int]], float, float]:
    """Per-trial rows (trial, seed, fcs, fps) plus the two coverage rates."""
    rows = []
    for t in range(setup.trials):
        fcs_hit, fps_hit = coverage_trial(setup, t)
        rows.append((t, setup.seed, int(fcs_hit), int(fps_hit)))
    fcs_rate = sum(r[2] for r in rows) / len(rows)
    fps_rate = sum(r[3] for r in rows) / len(rows)
    return rows, fcs_rate, fps_rate


def coverage_csv(setup: CoverageSetup) -> str:
    rows, fcs_rate, fps_rate = run_coverage(setup)
    lines = ["trial,seed,fcs_covered,fps_covered"]
    lines += [f"{t},{s},{a},{b}" for t, s, a, b in rows]
    lines.append(f"summary,,{format(fcs_rate, '.12g')},{format(fps_rate, '.12g')}")
    return "\n".join(lines) + "\n"
