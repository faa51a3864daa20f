"""Throughput, MACs and sample-quality measurements, and the sweep drivers built on them."""

from __future__ import annotations

import csv
import json
import math
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg
from threadpoolctl import threadpool_limits

from .caching import CacheSchedule, make_cache_schedule, run_sampler
from .diffusion import NoiseSchedule, SamplerConfig, synthetic_images
from .unet import ParameterSet, full_macs

CSV_COLUMNS = ["mode", "N", "c", "p", "branch", "S", "avg_macs", "pred_speedup",
               "throughput", "meas_speedup", "quality_fd"]


# --------------------------------------------------------------------------- quality


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Principal square root of a symmetric positive semi-definite matrix (Schur method)."""
    root = scipy.linalg.sqrtm(0.5 * (a + a.T))
    root = np.real(root)
    return 0.5 * (root + root.T)


def gaussian_fit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    return flat.mean(axis=0), np.atleast_2d(np.cov(flat, rowvar=False))


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """||mu1 - mu2||^2 + tr(cov1 + cov2 - 2 (cov1 cov2)^(1/2))."""
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    # tr((cov1 cov2)^(1/2)) == tr((s cov2 s)^(1/2)) with s = cov1^(1/2); the latter is symmetric
    s = sqrtm_psd(cov1)
    cross = np.trace(sqrtm_psd(s @ cov2 @ s))
    d = float(np.sum((mu1 - mu2) ** 2) + np.trace(cov1) + np.trace(cov2) - 2.0 * cross)
    return max(d, 0.0)


def quality_fd(generated: np.ndarray, reference: np.ndarray, min_samples: int = 64) -> float:
    """Fréchet distance between Gaussian fits of flattened pixels."""
    if len(generated) < min_samples or len(reference) < min_samples:
        raise ValueError(f"need >= {min_samples} samples per set, got {len(generated)} and {len(reference)}")
    if np.shape(generated)[1:] != np.shape(reference)[1:]:
        raise ValueError(f"sample shapes differ: {np.shape(generated)[1:]} vs {np.shape(reference)[1:]}")
    return frechet_distance(*gaussian_fit(generated), *gaussian_fit(reference))


def reference_set(spec, count: int = 1024, seed: int = 10_000) -> np.ndarray:
    return synthetic_images(count, seed, spec.image_size)


# --------------------------------------------------------------------------- timing


def measure_throughput(run: Callable[[], object], batch: int, warmup: int = 1, trials: int = 3,
                       threads: int | None = 1) -> float:
    """Median images per second over ``trials`` timed calls of ``run`` after ``warmup`` untimed ones."""
    if trials < 3:
        raise ValueError(f"trials must be >= 3, got {trials}")
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            run()
        rates = []
        for _ in range(trials):
            t0 = time.perf_counter()
            run()
            rates.append(batch / (time.perf_counter() - t0))
    return statistics.median(rates)


# --------------------------------------------------------------------------- reports


@dataclass
class BenchConfig:
    kind: str = "ddim"
    steps: int = 50
    samples: int = 256
    seed: int = 0
    branch: int = 1
    mode: str = "uniform"
    c: float | None = None
    p: float | None = None
    timing_batch: int = 16
    warmup: int = 1
    trials: int = 3
    reference_count: int = 1024
    reference_seed: int = 10_000
    measure: bool = True


@dataclass
class BenchReport:
    mode: str
    N: int
    c: float | None
    p: float | None
    branch: int
    S: int
    avg_macs: float
    pred_speedup: float
    throughput: float
    meas_speedup: float
    quality_fd: float
    n_full: int = 0
    n_partial: int = 0
    zero_cache: bool = False

    def row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_COLUMNS}


def generate(params: ParameterSet, sched: NoiseSchedule, cfg: BenchConfig, steps: int,
             cache: CacheSchedule | None, zero_cache: bool = False, batch: int | None = None):
    sampler = SamplerConfig(cfg.kind, steps, 0.0, cfg.seed, batch or cfg.samples)
    return run_sampler(params, sched, sampler, cache, zero_cache)


def evaluate(params: ParameterSet, sched: NoiseSchedule, cfg: BenchConfig, *, N: int = 1, steps: int | None = None,
             cached: bool = True, zero_cache: bool = False, reference: np.ndarray | None = None,
             baseline: float | None = None, mode: str | None = None, c=None, p=None,
             branch: int | None = None) -> BenchReport:
    """Quality, MACs and (optionally) throughput of one configuration.

    ``cached=False`` runs the plain sampler for ``steps`` steps. Predicted speedup
    compares per-image MACs against ``cfg.steps`` full passes.
    """
    spec = params.spec
    steps = cfg.steps if steps is None else steps
    mode = cfg.mode if mode is None else mode
    branch = cfg.branch if branch is None else branch
    cache = make_cache_schedule(steps, N, mode, c if c is not None else cfg.c,
                                p if p is not None else cfg.p, branch) if cached else None
    run = generate(params, sched, cfg, steps, cache, zero_cache)
    if reference is None:
        reference = reference_set(spec, cfg.reference_count, cfg.reference_seed)
    fd = quality_fd(np.clip(run.samples, -1.0, 1.0), reference)
    total = sum(r.macs for r in run.trace)
    pred = cfg.steps * full_macs(spec) / total
    thr = math.nan
    if cfg.measure:
        thr = measure_throughput(lambda: generate(params, sched, cfg, steps, cache, zero_cache, cfg.timing_batch),
                                 cfg.timing_batch, cfg.warmup, cfg.trials)
    n_full = sum(r.kind == "full" for r in run.trace)
    return BenchReport(
        mode=mode if cached else "plain", N=N if cached else 1,
        c=cache.c if cache is not None else None, p=cache.p if cache is not None else None,
        branch=branch, S=steps, avg_macs=total / len(run.trace), pred_speedup=pred,
        throughput=thr, meas_speedup=thr / baseline if baseline else math.nan, quality_fd=fd,
        n_full=n_full, n_partial=len(run.trace) - n_full, zero_cache=zero_cache,
    )


def baseline_throughput(params: ParameterSet, sched: NoiseSchedule, cfg: BenchConfig) -> float:
    return measure_throughput(lambda: generate(params, sched, cfg, cfg.steps, None, batch=cfg.timing_batch),
                              cfg.timing_batch, cfg.warmup, cfg.trials)


def sweep(params: ParameterSet, sched: NoiseSchedule, axis: str, values: Iterable, cfg: BenchConfig,
          N: int = 5) -> list[BenchReport]:
    """One report per grid point.

    axis "N": caching intervals; "branch": skip branches at interval ``N``;
    "cp": (c, p) pairs for the non-uniform schedule at interval ``N``;
    "table6": for each N, DeepCache next to the plain sampler with as many
    steps as DeepCache runs full passes.
    """
    reference = reference_set(params.spec, cfg.reference_count, cfg.reference_seed)
    base = baseline_throughput(params, sched, cfg) if cfg.measure else None
    common = dict(reference=reference, baseline=base)
    out: list[BenchReport] = []
    for v in values:
        if axis == "N":
            out.append(evaluate(params, sched, cfg, N=int(v), **common))
        elif axis == "branch":
            out.append(evaluate(params, sched, cfg, N=N, branch=int(v), **common))
        elif axis == "cp":
            c, p = v
            out.append(evaluate(params, sched, cfg, N=N, mode="nonuniform", c=c, p=p, **common))
        elif axis == "table6":
            cached = evaluate(params, sched, cfg, N=int(v), **common)
            out.append(cached)
            out.append(evaluate(params, sched, cfg, steps=cached.n_full, cached=False, **common))
        else:
            raise ValueError(f"unknown sweep axis {axis!r}")
    return out


def write_reports(reports: Sequence[BenchReport], csv_path: str | Path, json_path: str | Path | None = None) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow({k: "" if v is None else v for k, v in r.row().items()})
    if json_path is not None:
        rows = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.row().items()} for r in reports]
        Path(json_path).write_text(json.dumps(rows, indent=1))
