"""Noise schedules, forward corruption, DDPM/DDIM reverse updates and epsilon-prediction training."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, mse_loss
from .unet import ParameterSet, forward_full

log = logging.getLogger(__name__)


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-index beta/alpha tables. ``timesteps[j]`` is the model timestep of index j."""

    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    sigmas: np.ndarray = field(repr=False)
    timesteps: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return len(self.betas)

    @classmethod
    def from_betas(cls, betas: Sequence[float], timesteps: Sequence[int] | None = None) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) == 0:
            raise ScheduleError("betas must be a non-empty 1-D sequence")
        if np.any(betas < 0) or np.any(betas >= 1):
            raise ScheduleError("every beta must lie in [0, 1)")
        alphas = 1.0 - betas
        ts = np.arange(len(betas)) if timesteps is None else np.asarray(timesteps, dtype=np.int64)
        return cls(betas, alphas, np.cumprod(alphas), np.sqrt(betas), ts)


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule over t = 0..T-1."""
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def sampler_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly strided ascending subsequence of length ``steps`` starting at 0."""
    if not 1 <= steps <= T:
        raise ScheduleError(f"steps must be in [1, {T}], got {steps}")
    return (np.arange(steps, dtype=np.int64) * T) // steps


def respace(sched: NoiseSchedule, timesteps: Sequence[int]) -> NoiseSchedule:
    """Schedule over a timestep subsequence with the same cumulative alpha_bar at each kept step."""
    ts = np.asarray(timesteps, dtype=np.int64)
    ab = sched.alpha_bars[ts]
    prev = np.concatenate([[1.0], ab[:-1]])
    return NoiseSchedule.from_betas(1.0 - ab / prev, ts)


def _at(t, sched: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= sched.T):
        raise ScheduleError(f"timestep index out of range [0, {sched.T}): {t}")
    return t


def q_sample(x0: np.ndarray, t, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * noise; ``t`` may be per-sample."""
    if x0.shape != noise.shape:
        raise ScheduleError(f"x0 {x0.shape} and noise {noise.shape} differ in shape")
    t = _at(t, sched)
    ab = sched.alpha_bars[t]
    a = np.sqrt(ab).astype(x0.dtype)
    b = np.sqrt(1.0 - ab).astype(x0.dtype)
    if t.ndim:
        a = a.reshape((-1,) + (1,) * (x0.ndim - 1))
        b = b.reshape((-1,) + (1,) * (x0.ndim - 1))
    return a * x0 + b * noise


def ddpm_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, z: np.ndarray | None, sched: NoiseSchedule) -> np.ndarray:
    """Ancestral update; the noise term is dropped at t == 0."""
    t = int(_at(t, sched))
    dt = x_t.dtype.type
    alpha, ab = sched.alphas[t], sched.alpha_bars[t]
    inv_sqrt_alpha = dt(1.0 / math.sqrt(alpha))
    coef = dt((1.0 - alpha) / math.sqrt(1.0 - ab)) if ab < 1.0 else dt(0.0)
    out = inv_sqrt_alpha * (x_t - coef * eps_hat)
    if t > 0 and z is not None:
        out = out + dt(sched.sigmas[t]) * z
    return out


def ddim_step(
    x_t: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    t_prev: int,
    eta: float,
    z: np.ndarray | None,
    sched: NoiseSchedule,
) -> np.ndarray:
    """DDIM update from index t to t_prev (t_prev = -1 means the clean end, alpha_bar = 1)."""
    if not t_prev < t:
        raise ScheduleError(f"DDIM needs t_prev < t, got t={t}, t_prev={t_prev}")
    t = int(_at(t, sched))
    if t_prev < -1:
        raise ScheduleError(f"t_prev must be >= -1, got {t_prev}")
    dt = x_t.dtype.type
    ab = sched.alpha_bars[t]
    ab_prev = 1.0 if t_prev < 0 else sched.alpha_bars[t_prev]
    sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab)) * math.sqrt(1.0 - ab / ab_prev) if eta else 0.0
    x0 = (x_t - dt(math.sqrt(1.0 - ab)) * eps_hat) / dt(math.sqrt(ab))
    out = dt(math.sqrt(ab_prev)) * x0 + dt(math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0))) * eps_hat
    if sigma > 0:
        if z is None:
            raise ScheduleError("eta > 0 needs a noise sample z")
        out = out + dt(sigma) * z
    return out


def predict_x0(x_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    ab = sched.alpha_bars[int(_at(t, sched))]
    dt = x_t.dtype.type
    return (x_t - dt(math.sqrt(1.0 - ab)) * eps_hat) / dt(math.sqrt(ab))


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddim"
    steps: int = 100
    eta: float = 0.0
    seed: int = 0
    batch: int = 16

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise ScheduleError(f"sampler kind must be 'ddpm' or 'ddim', got {self.kind!r}")
        if self.steps < 1:
            raise ScheduleError(f"steps must be >= 1, got {self.steps}")
        if self.batch < 1:
            raise ScheduleError(f"batch must be >= 1, got {self.batch}")
        if self.eta < 0:
            raise ScheduleError(f"eta must be >= 0, got {self.eta}")


# --------------------------------------------------------------------------- noise & data


def trajectory_noise(seed: int, trajectory: int, step: int, shape: tuple[int, ...]) -> np.ndarray:
    """Standard normal draw from a Philox stream keyed by (seed, trajectory, step)."""
    key = np.random.SeedSequence([int(seed), int(trajectory), int(step)])
    return np.random.Generator(np.random.Philox(key)).standard_normal(shape, dtype=np.float32)


def batch_noise(seed: int, trajectories: Sequence[int], step: int, shape: tuple[int, ...]) -> np.ndarray:
    return np.stack([trajectory_noise(seed, tr, step, shape) for tr in trajectories])


def synthetic_images(count: int, seed: int, size: int = 16) -> np.ndarray:
    """Single-channel images in [-1, 1]: one to three gaussian blobs or axis-aligned bars on a dark field."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.empty((count, 1, size, size), dtype=np.float32)
    for n in range(count):
        canvas = np.zeros((size, size))
        for _ in range(rng.integers(1, 4)):
            level = rng.uniform(0.5, 1.0)
            if rng.random() < 0.5:
                cy, cx = rng.uniform(2, size - 2, size=2)
                s = rng.uniform(1.0, 2.5)
                canvas += level * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
            else:
                length = rng.integers(size // 3, size - 2)
                width = rng.integers(1, 4)
                a = rng.integers(0, size - length + 1)
                b = rng.integers(0, size - width + 1)
                if rng.random() < 0.5:
                    canvas[b:b + width, a:a + length] += level
                else:
                    canvas[a:a + length, b:b + width] += level
        out[n, 0] = 2.0 * np.clip(canvas, 0.0, 1.0) - 1.0
    return out


# --------------------------------------------------------------------------- training


def eps_loss(params: ParameterSet, sched: NoiseSchedule, x0: np.ndarray, seed: int) -> float:
    """Denoising loss on a fixed batch with (t, noise) drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    t = rng.integers(0, sched.T, size=len(x0))
    eps = rng.standard_normal(x0.shape, dtype=np.float32)
    pred, _ = forward_full(params, q_sample(x0, t, eps, sched), t)
    return float(np.mean((pred.data - eps) ** 2))


def train(
    params: ParameterSet,
    sched: NoiseSchedule,
    dataset: np.ndarray,
    epochs: int = 30,
    lr: float = 2e-3,
    seed: int = 0,
    *,
    batch_size: int = 64,
    optimizer: str = "adam",
    momentum: float = 0.9,
    on_step: Callable[[int, int, float], None] | None = None,
) -> tuple[ParameterSet, list[float]]:
    """Minimise the epsilon-prediction MSE. Returns new params and per-epoch mean loss.

    ``optimizer`` is "adam" (betas 0.9/0.999, eps 1e-8) or "sgd" (heavy-ball
    momentum). Plain SGD trains this normalisation-free net far more slowly.
    """
    if optimizer not in ("adam", "sgd"):
        raise ValueError(f"optimizer must be 'adam' or 'sgd', got {optimizer!r}")
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if sched.T != params.spec.num_timesteps:
        raise ValueError(f"schedule has {sched.T} steps, network expects {params.spec.num_timesteps}")
    spec = params.spec
    rng = np.random.default_rng(seed)
    weights = {k: np.array(v, dtype=np.float32) for k, v in params.tensors.items()}
    velocity = {k: np.zeros_like(v) for k, v in weights.items()}
    second = {k: np.zeros_like(v) for k, v in weights.items()} if optimizer == "adam" else None
    lr32, mu32 = np.float32(lr), np.float32(momentum)
    b1, b2 = np.float32(0.9), np.float32(0.999)
    bs = min(batch_size, len(dataset))
    history = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(dataset) - bs + 1, bs):
            x0 = dataset[order[start:start + bs]]
            t = rng.integers(0, sched.T, size=bs)
            eps = rng.standard_normal(x0.shape, dtype=np.float32)
            leaves = {k: Tensor(v, requires_grad=True) for k, v in weights.items()}
            pred, _ = forward_full((spec, leaves), q_sample(x0, t, eps, sched), t)
            loss = mse_loss(pred, Tensor(eps))
            loss.backward()
            if second is None:
                for k, leaf in leaves.items():
                    v = velocity[k]
                    v *= mu32
                    v += leaf.grad
                    weights[k] -= lr32 * v
            else:
                # bias-corrected step size folded into one scalar
                scale = np.float32(lr * math.sqrt(1 - 0.999 ** (step + 1)) / (1 - 0.9 ** (step + 1)))
                for k, leaf in leaves.items():
                    g, m1, m2 = leaf.grad, velocity[k], second[k]
                    m1 *= b1
                    m1 += (1 - b1) * g
                    m2 *= b2
                    m2 += (1 - b2) * g * g
                    weights[k] -= scale * m1 / (np.sqrt(m2) + np.float32(1e-8))
            losses.append(float(loss.data))
            if on_step is not None:
                on_step(epoch, step, losses[-1])
            step += 1
        history.append(float(np.mean(losses)))
        log.info("epoch %d loss %.5f", epoch, history[-1])
    return ParameterSet(spec, weights), history
