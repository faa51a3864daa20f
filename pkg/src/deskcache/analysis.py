"""Temporal similarity of the cacheable feature along a denoising trajectory."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .caching import run_sampler, uniform_schedule
from .diffusion import NoiseSchedule, SamplerConfig
from .unet import ParameterSet


def collect_features(params: ParameterSet, sched: NoiseSchedule, sampler: SamplerConfig, branch: int) -> list[np.ndarray]:
    """u_{m+1} at every step of an uncached trajectory (the tensor a cache would hold)."""
    feats: list[np.ndarray] = []
    # N = 1 runs a full pass at every step and exports the branch feature each time
    run_sampler(params, sched, sampler, uniform_schedule(sampler.steps, 1, branch),
                on_step=lambda s, kind, eps, cache: feats.append(cache.feature.copy()))
    return feats


def similarity_matrix(features: Sequence[np.ndarray]) -> np.ndarray:
    """Cosine similarity between flattened features; a zero-norm feature scores 0 against anything.

    The diagonal is set to exactly 1 (including for zero-norm features).
    """
    if len(features) < 2:
        raise ValueError("need at least two features")
    shape = np.shape(features[0])
    if any(np.shape(f) != shape for f in features):
        raise ValueError("all features must share one shape")
    flat = np.stack([np.asarray(f, dtype=np.float64).ravel() for f in features])
    norms = np.linalg.norm(flat, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = flat / safe[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim[norms == 0, :] = 0.0
    sim[:, norms == 0] = 0.0
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return sim


def frac_above(sim: np.ndarray, tau: float = 0.95) -> np.ndarray:
    """Per step, the share of other steps whose similarity exceeds ``tau``."""
    n = sim.shape[0]
    above = sim > tau
    np.fill_diagonal(above, False)
    return above.sum(axis=1) / (n - 1)


def adjacent_vs_distant(sim: np.ndarray, min_gap: float | None = None) -> tuple[float, float]:
    """Mean similarity of neighbouring steps and of step pairs at least ``min_gap`` apart (default S/5)."""
    n = sim.shape[0]
    gap = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    min_gap = n / 5 if min_gap is None else min_gap
    return float(sim[gap == 1].mean()), float(sim[gap >= min_gap].mean())


def write_matrix_csv(sim: np.ndarray, path: str | Path) -> None:
    with open(path, "w") as fh:
        for row in sim:
            fh.write(",".join(f"{v:.6f}" for v in row) + "\n")


def write_fraction_csv(frac: np.ndarray, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("step,fraction\n")
        for i, v in enumerate(frac):
            fh.write(f"{i},{v:.6f}\n")
