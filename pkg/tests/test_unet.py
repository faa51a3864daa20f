import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deskcache.tensor import ShapeError
from deskcache.unet import (
    CacheState,
    SpecError,
    UNetSpec,
    branch_macs,
    forward_full,
    forward_partial,
    full_macs,
    init_params,
    layer_plan,
    load_checkpoint,
    partial_layer_names,
    save_checkpoint,
)

SMALL = UNetSpec(depth=2, base_channels=8, channel_mult=(1, 2), image_size=16, time_embed_dim=16)


@pytest.fixture(scope="module")
def small_params():
    return init_params(SMALL, 0)


def rand_x(spec, n=2, seed=0):
    return np.random.default_rng(seed).standard_normal((n, spec.in_channels, spec.image_size, spec.image_size)).astype(np.float32)


def test_invalid_specs_rejected():
    with pytest.raises(SpecError):
        UNetSpec(depth=2, channel_mult=(1,))
    with pytest.raises(SpecError):
        UNetSpec(depth=3, channel_mult=(1, 2, 2), image_size=12)
    with pytest.raises(SpecError):
        UNetSpec(time_embed_dim=7)


def test_init_deterministic_and_seeded():
    a, b, c = init_params(SMALL, 3), init_params(SMALL, 3), init_params(SMALL, 4)
    assert a.equals(b)
    assert not a.equals(c)


def test_biases_zero_and_kaiming_bound():
    p = init_params(SMALL, 0)
    assert not np.any(p["down.1.conv1.bias"])
    w = p["up.1.conv1.weight"]  # fan-in (8 + 16) * 9
    assert np.abs(w).max() <= np.sqrt(6 / 216)


def test_parameter_count_hand_enumerated():
    # (weights + biases) per layer, E = 16, channels 8 and 16
    time = 2 * (16 * 16 + 16)
    down1 = (1 * 8 * 9 + 8) + (16 * 8 + 8) + (8 * 8 * 9 + 8)
    down2 = (8 * 16 * 9 + 16) + (16 * 16 + 16) + (16 * 16 * 9 + 16)
    mid = 2 * (16 * 16 * 9 + 16)
    up2 = ((16 + 16) * 16 * 9 + 16) + (16 * 16 + 16) + (16 * 16 * 9 + 16)
    up1 = ((16 + 8) * 8 * 9 + 8) + (16 * 8 + 8) + (8 * 8 * 9 + 8)
    head = 8 * 1 * 9 + 1
    assert init_params(SMALL, 0).count() == time + down1 + down2 + mid + up2 + up1 + head == 19489


def test_parameter_names_follow_prefixes(small_params):
    prefixes = ("down.", "mid.", "up.", "time.", "head.")
    assert all(n.startswith(prefixes) for n in small_params.names())


def test_branch_macs_hand_enumerated_small():
    # per-image MACs; conv = Cin*Cout*9*side^2, linear = F*G
    time = 2 * 16 * 16
    d1 = 1 * 8 * 9 * 256 + 16 * 8 + 8 * 8 * 9 * 256
    d2 = 8 * 16 * 9 * 64 + 16 * 16 + 16 * 16 * 9 * 64
    mid = 2 * 16 * 16 * 9 * 16
    u2 = 32 * 16 * 9 * 64 + 16 * 16 + 16 * 16 * 9 * 64
    u1 = 24 * 8 * 9 * 256 + 16 * 8 + 8 * 8 * 9 * 256
    head = 8 * 1 * 9 * 256
    full = time + d1 + d2 + mid + u2 + u1 + head
    table = branch_macs(SMALL)
    assert full == 1_512_704
    assert [(r.branch, r.partial, r.full) for r in table] == [
        (1, time + d1 + u1 + head, full),
        (2, time + d1 + d2 + u2 + u1 + head, full),
    ]
    assert table[0].partial == 774_912


@pytest.mark.parametrize("spec", [SMALL, UNetSpec(), UNetSpec(depth=4, channel_mult=(1, 1, 2, 2), image_size=32)])
def test_branch_macs_partition_and_monotone(spec):
    table = branch_macs(spec)
    assert table[-1].partial + table[-1].mid == table[-1].full == full_macs(spec)
    parts = [r.partial for r in table]
    assert all(a < b for a, b in zip(parts, parts[1:]))


def test_export_does_not_perturb(small_params):
    x = rand_x(SMALL)
    plain, none = forward_full(small_params, x, 123)
    assert none is None
    for m in (1, 2):
        eps, cache = forward_full(small_params, x, 123, export_branch=m)
        assert np.array_equal(eps.data, plain.data)
        assert cache.feature.shape == SMALL.cache_shape(m, 2)


def test_forward_deterministic_and_time_dependent(small_params):
    x = rand_x(SMALL, seed=1)
    a, _ = forward_full(small_params, x, 0)
    b, _ = forward_full(small_params, x, 0)
    c, _ = forward_full(small_params, x, SMALL.num_timesteps - 1)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)
    assert a.shape == x.shape


def test_export_branch_out_of_range(small_params):
    with pytest.raises(SpecError):
        forward_full(small_params, rand_x(SMALL), 0, export_branch=3)
    with pytest.raises(SpecError):
        forward_full(small_params, rand_x(SMALL), 0, export_branch=0)


def test_timestep_out_of_range(small_params):
    with pytest.raises(SpecError):
        forward_full(small_params, rand_x(SMALL), SMALL.num_timesteps)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), t=st.integers(0, 999), m=st.integers(1, 2), n=st.integers(1, 3))
def test_partial_with_same_step_cache_is_exact(seed, t, m, n):
    params = init_params(SMALL, seed % 1000)
    x = rand_x(SMALL, n, seed)
    eps, cache = forward_full(params, x, t, export_branch=m)
    assert np.array_equal(forward_partial(params, x, t, cache).data, eps.data)


def test_zero_cache_changes_output(small_params):
    x = rand_x(SMALL, seed=4)
    eps, cache = forward_full(small_params, x, 500, export_branch=1)
    zeroed = CacheState(1, 0, np.zeros_like(cache.feature))
    assert not np.array_equal(forward_partial(small_params, x, 500, zeroed).data, eps.data)


def test_cache_shape_mismatch_rejected(small_params):
    bad = CacheState(1, 0, np.zeros((2, 3, 8, 8), np.float32))
    with pytest.raises(ShapeError):
        forward_partial(small_params, rand_x(SMALL), 0, bad)


@pytest.mark.parametrize("m", [1, 2])
def test_probe_matches_partial_layer_list(small_params, m):
    x = rand_x(SMALL)
    _, cache = forward_full(small_params, x, 10, export_branch=m)
    seen = []
    forward_partial(small_params, x, 10, cache, probe=seen.append)
    assert seen == partial_layer_names(SMALL, m)
    full_seen = []
    forward_full(small_params, x, 10, probe=full_seen.append)
    assert full_seen == [layer.name for layer in layer_plan(SMALL)]


def test_partial_at_deepest_branch_skips_only_mid(small_params):
    plan = {layer.name: layer for layer in layer_plan(SMALL)}
    skipped = set(plan) - set(partial_layer_names(SMALL, 2))
    assert {plan[n].group for n in skipped} == {"mid", "down.2"}
    assert skipped - {"mid.conv1", "mid.conv2"} == {"down.2.pool"}


def test_checkpoint_roundtrip(tmp_path, small_params):
    path = tmp_path / "p.ckpt"
    save_checkpoint(small_params, path)
    back = load_checkpoint(path)
    assert back.spec == SMALL
    assert back.equals(small_params)
    save_checkpoint(back, tmp_path / "q.ckpt")
    assert path.read_bytes() == (tmp_path / "q.ckpt").read_bytes()


def test_checkpoint_blob_layout(tmp_path, small_params):
    import json

    path = tmp_path / "p.ckpt"
    save_checkpoint(small_params, path)
    head, _, blob = path.read_bytes().partition(b"\n")
    manifest = json.loads(head)
    entry = manifest["tensors"][3]
    count = int(np.prod(entry["shape"]))
    arr = np.frombuffer(blob, "<f4", count=count, offset=entry["offset"]).reshape(entry["shape"])
    assert np.array_equal(arr, small_params[entry["name"]])


def test_checkpoint_truncated_rejected(tmp_path, small_params):
    path = tmp_path / "p.ckpt"
    save_checkpoint(small_params, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(SpecError):
        load_checkpoint(path)
