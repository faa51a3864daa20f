"""Cache schedules and the accelerated sampling loop.

Step indices s count sampler steps from the noisiest (s = 0) to the last
(s = S - 1). Steps in ``full_steps`` run the whole network and refresh the
cache; every other step runs a partial pass against the most recent cache.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    batch_noise,
    ddim_step,
    ddpm_step,
    respace,
    sampler_timesteps,
)
from .unet import CacheState, ParameterSet, SpecError, forward_full, forward_partial, full_macs, partial_macs


class CacheError(RuntimeError):
    """A retrieve step found no cache to read. Unreachable for valid schedules."""


@dataclass(frozen=True)
class CacheSchedule:
    steps: int
    full_steps: tuple[int, ...]
    mode: str = "uniform"
    N: int = 1
    c: float | None = None
    p: float | None = None
    branch: int = 1

    def __post_init__(self):
        fs = self.full_steps
        if not fs or fs[0] != 0:
            raise ValueError("full_steps must start with step 0")
        if list(fs) != sorted(set(fs)) or fs[-1] >= self.steps:
            raise ValueError(f"full_steps must be sorted, unique and inside [0, {self.steps})")

    def is_full(self, s: int) -> bool:
        return s in self.full_steps

    def to_dict(self) -> dict:
        return {
            "S": self.steps,
            "N": self.N,
            "mode": self.mode,
            "c": self.c,
            "p": self.p,
            "branch": self.branch,
            "full_steps": list(self.full_steps),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def uniform_schedule(S: int, N: int, branch: int = 1) -> CacheSchedule:
    """Full inference every N steps: {0, N, 2N, ...} below S."""
    if S < 1:
        raise ValueError(f"S must be >= 1, got {S}")
    if N < 1:
        raise ValueError(f"caching interval N must be >= 1, got {N}")
    return CacheSchedule(S, tuple(range(0, S, N)), "uniform", N, branch=branch)


def _spow(x, a):
    return np.sign(x) * np.abs(x) ** a


def nonuniform_schedule(S: int, N: int, c: float, p: float, branch: int = 1) -> CacheSchedule:
    """Full steps spaced by a signed power law around the center step ``c``.

    Takes ceil(S/N) evenly spaced points between spow(-c, 1/p) and
    spow(S-c, 1/p) (end excluded), maps each back through spow(., p) + c,
    rounds half up and clamps to [0, S-1]. Collisions are refilled with the
    unused steps nearest to ``c`` so the count stays ceil(S/N).
    """
    if S < 1 or N < 1:
        raise ValueError(f"need S >= 1 and N >= 1, got S={S}, N={N}")
    if not p > 0:
        raise ValueError(f"power p must be > 0, got {p}")
    if not 0 <= c < S:
        raise ValueError(f"center c must lie in [0, {S}), got {c}")
    k = math.ceil(S / N)
    lo, hi = _spow(-float(c), 1.0 / p), _spow(float(S - c), 1.0 / p)
    ls = lo + (hi - lo) * np.arange(k, dtype=np.float64) / k
    picked = set(np.clip(np.floor(_spow(ls, p) + c + 0.5), 0, S - 1).astype(int).tolist())
    picked.add(0)
    for cand in sorted(range(S), key=lambda i: (abs(i - c), i)):
        if len(picked) >= k:
            break
        picked.add(cand)
    assert len(picked) == k
    return CacheSchedule(S, tuple(sorted(picked)), "nonuniform", N, float(c), float(p), branch)


def make_cache_schedule(S: int, N: int, mode: str = "uniform", c: float | None = None,
                        p: float | None = None, branch: int = 1) -> CacheSchedule:
    if mode == "uniform":
        return uniform_schedule(S, N, branch)
    if mode == "nonuniform":
        c = round(0.4 * S) if c is None else c
        p = 1.3 if p is None else p
        return nonuniform_schedule(S, N, c, p, branch)
    raise ValueError(f"unknown cache mode {mode!r}")


# --------------------------------------------------------------------------- sampling


@dataclass(frozen=True)
class StepRecord:
    step: int
    timestep: int
    kind: str  # "full" or "partial"
    macs: int  # per image
    cache_step: int | None = None  # step that produced the cache read here


@dataclass
class SampleRun:
    samples: np.ndarray = field(repr=False)
    trace: list[StepRecord]

    @property
    def avg_macs(self) -> float:
        return sum(r.macs for r in self.trace) / len(self.trace)

    def trace_json(self) -> str:
        return json.dumps([r.__dict__ for r in self.trace], indent=1)


def run_sampler(
    params: ParameterSet,
    sched: NoiseSchedule,
    sampler: SamplerConfig,
    cache_schedule: CacheSchedule | None = None,
    ablation_zero_cache: bool = False,
    *,
    trajectories=None,
    on_step=None,
) -> SampleRun:
    """Run DDPM or DDIM from pure noise, optionally with feature caching.

    Trajectory i draws all its noise from the (seed, i, step) stream, so a
    sample does not depend on which other trajectories share its batch.
    ``on_step(s, kind, eps, cache)`` is called after each network evaluation.
    """
    spec = params.spec
    if sched.T != spec.num_timesteps:
        raise SpecError(f"schedule length {sched.T} != network timesteps {spec.num_timesteps}")
    S = sampler.steps
    if cache_schedule is not None:
        if cache_schedule.steps != S:
            raise ValueError(f"cache schedule covers {cache_schedule.steps} steps, sampler runs {S}")
        if not 1 <= cache_schedule.branch <= spec.depth:
            raise SpecError(f"branch {cache_schedule.branch} outside [1, {spec.depth}]")
    trajectories = list(range(sampler.batch)) if trajectories is None else list(trajectories)
    shape = (spec.in_channels, spec.image_size, spec.image_size)
    seq = sampler_timesteps(sched.T, S)
    local = respace(sched, seq) if sampler.kind == "ddpm" else sched
    m_full = full_macs(spec)
    m_part = partial_macs(spec, cache_schedule.branch) if cache_schedule is not None else None
    full_set = frozenset(cache_schedule.full_steps) if cache_schedule is not None else None

    x = batch_noise(sampler.seed, trajectories, 0, shape)
    cache: CacheState | None = None
    trace: list[StepRecord] = []
    for s in range(S):
        j = S - 1 - s
        t = int(seq[j])
        if cache_schedule is None:
            eps, _ = forward_full(params, x, t)
            kind, record = "full", StepRecord(s, t, "full", m_full)
        elif s in full_set:
            eps, cache = forward_full(params, x, t, export_branch=cache_schedule.branch, step=s)
            kind, record = "full", StepRecord(s, t, "full", m_full)
        else:
            if cache is None:
                raise CacheError(f"step {s} would retrieve before any cache write")
            used = cache
            if ablation_zero_cache:
                used = CacheState(cache.branch, cache.produced_at_step, np.zeros_like(cache.feature))
            eps = forward_partial(params, x, t, used)
            kind, record = "partial", StepRecord(s, t, "partial", m_part, cache.produced_at_step)
        eps = eps.data
        trace.append(record)
        if on_step is not None:
            on_step(s, kind, eps, cache)
        needs_z = sampler.kind == "ddpm" and j > 0 or sampler.kind == "ddim" and sampler.eta > 0
        z = batch_noise(sampler.seed, trajectories, s + 1, shape) if needs_z else None
        if sampler.kind == "ddpm":
            x = ddpm_step(x, eps, j, z, local)
        else:
            x = ddim_step(x, eps, t, int(seq[j - 1]) if j > 0 else -1, sampler.eta, z, sched)
    return SampleRun(x, trace)
