"""Skip-branched U-Net denoiser with full and partial (cache-reading) execution.

Blocks are numbered 1..d from the shallowest. A down block D_i is
``conv3x3 + time-add + silu, conv3x3 + silu, avg_pool2`` and its pre-pool
activation is the skip feature handed to U_i. An up block U_i is
``upsample, concat(skip, main), conv3x3 + time-add + silu, conv3x3 + silu``.
The main-branch input of U_m is u_{m+1}: the output of U_{m+1}, or of the
mid block when m == d. That tensor is what a cache stores.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .tensor import (
    Conv2dDesc,
    FreeDesc,
    LinearDesc,
    OpDesc,
    ShapeError,
    Tensor,
    add_channelwise,
    avg_pool2,
    concat_channels,
    conv2d,
    linear,
    macs_of,
    silu,
    upsample_nearest,
)


class SpecError(ValueError):
    """Invalid architecture description or incompatible parameters."""


@dataclass(frozen=True)
class UNetSpec:
    depth: int = 3
    base_channels: int = 16
    channel_mult: tuple[int, ...] = (1, 2, 2)
    image_size: int = 16
    time_embed_dim: int = 32
    in_channels: int = 1
    num_timesteps: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "channel_mult", tuple(int(m) for m in self.channel_mult))
        if self.depth < 1:
            raise SpecError(f"depth must be >= 1, got {self.depth}")
        if len(self.channel_mult) != self.depth:
            raise SpecError(f"channel_mult has {len(self.channel_mult)} entries, depth is {self.depth}")
        if self.base_channels < 1 or min(self.channel_mult) < 1:
            raise SpecError("base_channels and channel_mult entries must be positive")
        if self.image_size < 2 ** self.depth or self.image_size % (2 ** self.depth):
            raise SpecError(f"image_size {self.image_size} must be divisible by 2**depth = {2 ** self.depth}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise SpecError(f"time_embed_dim must be even and >= 2, got {self.time_embed_dim}")
        if self.in_channels < 1 or self.num_timesteps < 1:
            raise SpecError("in_channels and num_timesteps must be positive")

    def channels(self, i: int) -> int:
        """Output channels of D_i and U_i (1-based)."""
        return self.base_channels * self.channel_mult[i - 1]

    def main_channels(self, m: int) -> int:
        """Channels of u_{m+1}, the main-branch feature entering U_m."""
        return self.channels(m + 1) if m < self.depth else self.channels(self.depth)

    def cache_shape(self, m: int, batch: int) -> tuple[int, int, int, int]:
        side = self.image_size // 2 ** m
        return (batch, self.main_channels(m), side, side)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "UNetSpec":
        return cls(**{k: (tuple(v) if k == "channel_mult" else v) for k, v in d.items()})


@dataclass(frozen=True)
class Layer:
    name: str
    group: str  # "time", "down.{i}", "mid", "up.{i}", "head"
    desc: OpDesc
    params: tuple[tuple[str, tuple[int, ...]], ...] = ()
    fan_in: int = 0


def layer_plan(spec: UNetSpec, batch: int = 1) -> list[Layer]:
    """Every layer of the network in execution order of a full pass."""
    e, s = spec.time_embed_dim, spec.image_size
    layers: list[Layer] = []

    def lin(name, group, f, g):
        layers.append(Layer(name, group, LinearDesc(batch, f, g), ((f"{name}.weight", (f, g)), (f"{name}.bias", (g,))), f))

    def conv(name, group, cin, cout, side):
        layers.append(Layer(
            name, group, Conv2dDesc(batch, cin, cout, 3, side, side),
            ((f"{name}.weight", (cout, cin, 3, 3)), (f"{name}.bias", (cout,))), cin * 9,
        ))

    lin("time.0", "time", e, e)
    lin("time.1", "time", e, e)
    cin = spec.in_channels
    for i in range(1, spec.depth + 1):
        side, c, g = s // 2 ** (i - 1), spec.channels(i), f"down.{i}"
        conv(f"{g}.conv1", g, cin, c, side)
        lin(f"{g}.temb", g, e, c)
        conv(f"{g}.conv2", g, c, c, side)
        layers.append(Layer(f"{g}.pool", g, FreeDesc("avg_pool2", (batch, c, side // 2, side // 2))))
        cin = c
    side, c = s // 2 ** spec.depth, spec.channels(spec.depth)
    conv("mid.conv1", "mid", c, c, side)
    conv("mid.conv2", "mid", c, c, side)
    for i in range(spec.depth, 0, -1):
        side, c, g = s // 2 ** (i - 1), spec.channels(i), f"up.{i}"
        main = spec.main_channels(i)
        layers.append(Layer(f"{g}.upsample", g, FreeDesc("upsample_nearest", (batch, main, side, side))))
        conv(f"{g}.conv1", g, c + main, c, side)
        lin(f"{g}.temb", g, e, c)
        conv(f"{g}.conv2", g, c, c, side)
    conv("head", "head", spec.channels(1), spec.in_channels, s)
    return layers


def partial_layer_names(spec: UNetSpec, m: int) -> list[str]:
    """Layers a partial pass at branch m executes, in execution order."""
    _check_branch(spec, m)
    keep = []
    for layer in layer_plan(spec):
        kind, _, rest = layer.group.partition(".")
        if kind in ("time", "head"):
            keep.append(layer.name)
        elif kind == "down" and int(rest) <= m and layer.name != f"down.{m}.pool":
            keep.append(layer.name)
        elif kind == "up" and int(rest) <= m:
            keep.append(layer.name)
    return keep


@dataclass(frozen=True)
class BranchMacs:
    branch: int
    partial: int
    full: int
    mid: int


def branch_macs(spec: UNetSpec) -> list[BranchMacs]:
    """Per-image MACs of a partial pass at every branch, alongside the full-pass total."""
    plan = layer_plan(spec)
    by_name = {layer.name: macs_of(layer.desc) for layer in plan}
    full = sum(by_name.values())
    mid = sum(macs_of(layer.desc) for layer in plan if layer.group == "mid")
    return [
        BranchMacs(m, sum(by_name[n] for n in partial_layer_names(spec, m)), full, mid)
        for m in range(1, spec.depth + 1)
    ]


def full_macs(spec: UNetSpec) -> int:
    return sum(macs_of(layer.desc) for layer in layer_plan(spec))


def partial_macs(spec: UNetSpec, m: int) -> int:
    return branch_macs(spec)[m - 1].partial


# --------------------------------------------------------------------------- parameters


@dataclass(frozen=True)
class ParameterSet:
    spec: UNetSpec
    tensors: Mapping[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        expected = {name: shape for layer in layer_plan(self.spec) for name, shape in layer.params}
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise SpecError(f"parameter names do not match spec (missing={missing}, extra={extra})")
        for name, shape in expected.items():
            if tuple(self.tensors[name].shape) != shape:
                raise SpecError(f"{name}: shape {self.tensors[name].shape}, spec wants {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return [name for layer in layer_plan(self.spec) for name, _ in layer.params]

    def count(self) -> int:
        return sum(int(a.size) for a in self.tensors.values())

    def equals(self, other: "ParameterSet") -> bool:
        return self.spec == other.spec and all(
            np.array_equal(self.tensors[n], other.tensors[n]) for n in self.names()
        )


def init_params(spec: UNetSpec, seed: int) -> ParameterSet:
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for layer in layer_plan(spec):
        for name, shape in layer.params:
            if name.endswith(".bias"):
                tensors[name] = np.zeros(shape, dtype=np.float32)
            else:
                bound = math.sqrt(6.0 / layer.fan_in)
                tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return ParameterSet(spec, tensors)


def save_checkpoint(params: ParameterSet, path: str | Path, extra: Mapping | None = None) -> None:
    """One line of JSON manifest, a newline, then the little-endian float32 blob."""
    entries, blobs, offset = [], [], 0
    for name in params.names():
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format": "deskcache-checkpoint", "version": 1, "spec": params.spec.to_dict(), "tensors": entries}
    if extra:
        manifest["extra"] = dict(extra)
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode())
        fh.write(b"\n")
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | Path) -> ParameterSet:
    raw = Path(path).read_bytes()
    head, sep, blob = raw.partition(b"\n")
    if not sep:
        raise SpecError(f"{path}: not a checkpoint (no manifest terminator)")
    try:
        manifest = json.loads(head)
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: unreadable manifest ({exc})") from None
    if manifest.get("format") != "deskcache-checkpoint":
        raise SpecError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    spec = UNetSpec.from_dict(manifest["spec"])
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start + 4 * count > len(blob):
            raise SpecError(f"{path}: tensor {entry['name']} runs past end of file")
        tensors[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=start).astype(np.float32).reshape(shape)
    return ParameterSet(spec, tensors)


# --------------------------------------------------------------------------- forward


@dataclass(frozen=True)
class CacheState:
    branch: int
    produced_at_step: int
    feature: np.ndarray = field(repr=False)


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(np.float32)


def _check_branch(spec: UNetSpec, m: int) -> None:
    if not isinstance(m, (int, np.integer)) or not 1 <= m <= spec.depth:
        raise SpecError(f"branch must be in [1, {spec.depth}], got {m!r}")


class _Net:
    """One forward evaluation; ``probe`` receives each executed layer name."""

    def __init__(self, params: Mapping[str, Tensor], spec: UNetSpec, probe: Callable[[str], None] | None):
        self.p, self.spec, self.probe = params, spec, probe

    def _mark(self, name):
        if self.probe is not None:
            self.probe(name)

    def conv(self, name, x):
        self._mark(name)
        return conv2d(x, self.p[f"{name}.weight"], self.p[f"{name}.bias"])

    def lin(self, name, x):
        self._mark(name)
        return linear(x, self.p[f"{name}.weight"], self.p[f"{name}.bias"])

    def time(self, t):
        emb = Tensor(timestep_embedding(t, self.spec.time_embed_dim))
        return silu(self.lin("time.1", silu(self.lin("time.0", emb))))

    def down(self, i, h, temb):
        g = f"down.{i}"
        a = silu(add_channelwise(self.conv(f"{g}.conv1", h), self.lin(f"{g}.temb", temb)))
        return silu(self.conv(f"{g}.conv2", a))

    def pool(self, i, skip):
        self._mark(f"down.{i}.pool")
        return avg_pool2(skip)

    def mid(self, h):
        return silu(self.conv("mid.conv2", silu(self.conv("mid.conv1", h))))

    def up(self, i, main, skip, temb):
        g = f"up.{i}"
        self._mark(f"{g}.upsample")
        cat = concat_channels(skip, upsample_nearest(main))
        a = silu(add_channelwise(self.conv(f"{g}.conv1", cat), self.lin(f"{g}.temb", temb)))
        return silu(self.conv(f"{g}.conv2", a))

    def head(self, u1):
        return self.conv("head", u1)


def _prepare(params, x, t):
    if isinstance(params, ParameterSet):
        spec = params.spec
        tensors = {k: Tensor(v) for k, v in params.tensors.items()}
    else:
        spec, tensors = params
    x = x if isinstance(x, Tensor) else Tensor(x)
    n = x.shape[0]
    if x.data.ndim != 4 or x.shape[1:] != (spec.in_channels, spec.image_size, spec.image_size):
        raise ShapeError(f"input shape {x.shape} incompatible with spec (C={spec.in_channels}, size={spec.image_size})")
    ts = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
    if ts.min() < 0 or ts.max() >= spec.num_timesteps:
        raise SpecError(f"timestep out of range [0, {spec.num_timesteps}): {t!r}")
    return spec, tensors, x, ts


def forward_full(params, x, t, export_branch: int | None = None, *, step: int = 0, probe=None):
    """Full pass. Returns (eps, cache) where cache holds u_{m+1} when ``export_branch`` is m.

    ``params`` is a ParameterSet or, for training, a ``(spec, {name: Tensor})`` pair.
    """
    spec, p, x, ts = _prepare(params, x, t)
    if export_branch is not None:
        _check_branch(spec, export_branch)
    net = _Net(p, spec, probe)
    temb = net.time(ts)
    skips, h = [], x
    for i in range(1, spec.depth + 1):
        s = net.down(i, h, temb)
        skips.append(s)
        h = net.pool(i, s)
    u = net.mid(h)
    cache = None
    for i in range(spec.depth, 0, -1):
        if i == export_branch:
            cache = CacheState(export_branch, step, u.data)
        u = net.up(i, u, skips[i - 1], temb)
    return net.head(u), cache


def forward_partial(params, x, t, cache: CacheState, *, probe=None):
    """Partial pass at branch ``cache.branch``: D_1..D_m, then U_m..U_1 fed by the cached feature."""
    spec, p, x, ts = _prepare(params, x, t)
    m = cache.branch
    _check_branch(spec, m)
    want = spec.cache_shape(m, x.shape[0])
    if tuple(cache.feature.shape) != want:
        raise ShapeError(f"cached feature shape {tuple(cache.feature.shape)} != expected {want}")
    net = _Net(p, spec, probe)
    temb = net.time(ts)
    skips, h = [], x
    for i in range(1, m + 1):
        s = net.down(i, h, temb)
        skips.append(s)
        if i < m:
            h = net.pool(i, s)
    u = Tensor(cache.feature)
    for i in range(m, 0, -1):
        u = net.up(i, u, skips[i - 1], temb)
    return net.head(u)
