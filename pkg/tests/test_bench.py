import csv
import json
import math

import numpy as np
import pytest

from deskcache.bench import (
    CSV_COLUMNS,
    BenchConfig,
    evaluate,
    frechet_distance,
    measure_throughput,
    quality_fd,
    sqrtm_psd,
    sweep,
    write_reports,
)
from deskcache.diffusion import make_schedule
from deskcache.unet import UNetSpec, init_params


def random_spd(rng, n):
    a = rng.standard_normal((n, n))
    return a @ a.T + 0.1 * np.eye(n)


def eig_sqrt(a):
    w, v = np.linalg.eigh(a)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def test_sqrtm_against_eigendecomposition():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = random_spd(rng, 4)
        np.testing.assert_allclose(sqrtm_psd(a), eig_sqrt(a), atol=1e-9)
        np.testing.assert_allclose(sqrtm_psd(a) @ sqrtm_psd(a), a, atol=1e-9)


def test_trace_term_against_eigenvalues_of_product():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = random_spd(rng, 4), random_spd(rng, 4)
        # eigenvalues of a @ b are real and positive for SPD a, b
        lam = np.linalg.eigvals(a @ b).real
        expect = np.trace(a) + np.trace(b) - 2 * np.sum(np.sqrt(lam))
        assert frechet_distance(np.zeros(4), a, np.zeros(4), b) == pytest.approx(expect, abs=1e-8)


def test_closed_form_one_dimensional():
    assert frechet_distance([0.0], [[1.0]], [1.0], [[1.0]]) == pytest.approx(1.0, abs=1e-12)
    assert frechet_distance([0.0], [[4.0]], [0.0], [[1.0]]) == pytest.approx(1.0, abs=1e-12)  # (2 - 1)^2


def test_identical_sets_zero():
    a = np.random.default_rng(2).uniform(-1, 1, (128, 1, 4, 4))
    assert quality_fd(a, a) < 1e-6


def test_fd_symmetric_and_nonnegative():
    rng = np.random.default_rng(3)
    a, b = rng.normal(0, 1, (100, 6)), rng.normal(0.3, 1.5, (90, 6))
    assert quality_fd(a, b) == pytest.approx(quality_fd(b, a), rel=1e-9)
    assert quality_fd(a, b) > 0


def test_self_distance_negligible_next_to_noise():
    rng = np.random.default_rng(4)
    a = np.tanh(rng.normal(0, 1, (256, 1, 8, 8)))
    noise = rng.normal(0, 1, a.shape)
    assert quality_fd(a, a) < 1e-6 * quality_fd(a, noise)


def test_fd_rejects_small_or_mismatched():
    with pytest.raises(ValueError):
        quality_fd(np.zeros((10, 4)), np.zeros((100, 4)))
    with pytest.raises(ValueError):
        quality_fd(np.zeros((100, 4)), np.zeros((100, 5)))


def test_measure_throughput_median():
    calls = []
    rate = measure_throughput(lambda: calls.append(1), batch=8, warmup=2, trials=3)
    assert len(calls) == 5 and rate > 0
    with pytest.raises(ValueError):
        measure_throughput(lambda: None, 1, trials=2)


SPEC = UNetSpec(depth=3, base_channels=8, channel_mult=(1, 2, 2), image_size=8, time_embed_dim=16, num_timesteps=100)


@pytest.fixture(scope="module")
def model():
    return init_params(SPEC, 0), make_schedule(100, 1e-3, 0.1)


def cfg(**kw):
    base = dict(steps=20, samples=64, measure=False, reference_count=128)
    base.update(kw)
    return BenchConfig(**base)


def test_n_sweep_macs_strictly_decreasing(model):
    params, sched = model
    reps = sweep(params, sched, "N", [1, 2, 3, 5, 10], cfg())
    macs = [r.avg_macs for r in reps]
    assert all(a > b for a, b in zip(macs, macs[1:]))
    assert reps[0].pred_speedup == 1.0


def test_branch_sweep_speedup_strictly_decreasing(model):
    params, sched = model
    reps = sweep(params, sched, "branch", [1, 2, 3], cfg(), N=5)
    sp = [r.pred_speedup for r in reps]
    assert all(a > b for a, b in zip(sp, sp[1:]))


def test_cp_grid(model, tmp_path):
    params, sched = model
    S = 20
    grid = [(round(f * S), p) for f in (0.2, 0.4, 0.6) for p in (1.1, 1.3, 1.5)]
    reps = sweep(params, sched, "cp", grid, cfg(), N=5)
    assert len(reps) == 9
    assert {r.mode for r in reps} == {"nonuniform"}
    write_reports(reps, tmp_path / "b.csv", tmp_path / "b.json")
    with open(tmp_path / "b.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == CSV_COLUMNS and len(rows) == 9
    js = json.loads((tmp_path / "b.json").read_text())
    assert len(js) == 9 and list(js[0]) == CSV_COLUMNS


def test_table6_pairs_equal_full_budget(model):
    params, sched = model
    reps = sweep(params, sched, "table6", [5], cfg())
    cached, plain = reps
    assert plain.mode == "plain" and plain.S == cached.n_full == 4
    assert plain.pred_speedup == pytest.approx(20 / 4)


def test_reports_deterministic_except_timing(model):
    params, sched = model
    a = evaluate(params, sched, cfg(), N=5)
    b = evaluate(params, sched, cfg(), N=5)
    assert a == b or (math.isnan(a.throughput) and a.quality_fd == b.quality_fd and a.avg_macs == b.avg_macs)


def test_measured_speedup_is_ratio(model):
    params, sched = model
    c = cfg(measure=True, timing_batch=2, trials=3, warmup=0)
    r = evaluate(params, sched, c, N=5, baseline=123.0)
    assert r.meas_speedup == r.throughput / 123.0
