import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from deskcache.analysis import (
    adjacent_vs_distant,
    collect_features,
    frac_above,
    similarity_matrix,
    write_fraction_csv,
    write_matrix_csv,
)
from deskcache.diffusion import SamplerConfig, make_schedule
from deskcache.unet import UNetSpec, init_params


def test_duplicates_all_ones():
    f = np.random.default_rng(0).standard_normal((2, 3, 4))
    np.testing.assert_allclose(similarity_matrix([f, f, f]), np.ones((3, 3)), atol=1e-12)


def test_orthogonal_one_hot():
    sim = similarity_matrix([np.array([1.0, 0, 0]), np.array([0, 1.0, 0])])
    assert sim[0, 1] == 0 and sim[1, 0] == 0


def test_hand_computed_cosines():
    a, b, c = np.array([1.0, 2, 2]), np.array([0.0, 3, 4]), np.array([1.0, 0, 0])
    expect = np.array([
        [1, 14 / 15, 1 / 3],
        [14 / 15, 1, 0],
        [1 / 3, 0, 1],
    ])
    np.testing.assert_allclose(similarity_matrix([a, b, c]), expect, atol=1e-12)


def test_zero_norm_convention():
    sim = similarity_matrix([np.zeros(3), np.ones(3)])
    assert sim[0, 1] == 0 and sim[0, 0] == 1


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        similarity_matrix([np.ones(3)])
    with pytest.raises(ValueError):
        similarity_matrix([np.ones(3), np.ones(4)])


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(st.integers(2, 8), st.integers(1, 12)),
                  elements=st.floats(-100, 100, width=32)))
def test_matrix_properties(feats):
    sim = similarity_matrix(list(feats))
    assert np.array_equal(sim, sim.T)
    assert np.all(np.diag(sim) == 1)
    assert np.all((sim >= -1) & (sim <= 1))


def test_frac_above_extremes():
    assert np.all(frac_above(np.ones((5, 5))) == 1)
    assert np.all(frac_above(np.eye(5)) == 0)


def test_frac_above_hand_matrix():
    sim = np.array([
        [1.0, 0.99, 0.96, 0.5],
        [0.99, 1.0, 0.95, 0.97],
        [0.96, 0.95, 1.0, 0.2],
        [0.5, 0.97, 0.2, 1.0],
    ])
    # strict inequality: 0.95 itself does not count
    np.testing.assert_array_equal(frac_above(sim, 0.95), [2 / 3, 2 / 3, 1 / 3, 1 / 3])


def test_adjacent_vs_distant():
    n = 10
    sim = 1.0 - np.abs(np.subtract.outer(np.arange(n), np.arange(n))) / n
    adj, far = adjacent_vs_distant(sim)
    assert adj == pytest.approx(0.9)
    assert far < adj


SPEC = UNetSpec(depth=2, base_channels=8, channel_mult=(1, 2), image_size=8, time_embed_dim=16, num_timesteps=100)


@pytest.fixture(scope="module")
def feats():
    params, sched = init_params(SPEC, 0), make_schedule(100, 1e-3, 0.1)
    return [collect_features(params, sched, SamplerConfig("ddim", 12, 0.0, 5, 2), 1) for _ in range(2)]


def test_collect_features_shape_and_determinism(feats):
    a, b = feats
    assert len(a) == 12
    assert all(f.shape == SPEC.cache_shape(1, 2) for f in a)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], a[-1])


def test_csv_exports(tmp_path):
    sim = similarity_matrix([np.array([1.0, 0]), np.array([1.0, 1.0]), np.array([0, 1.0])])
    write_matrix_csv(sim, tmp_path / "m.csv")
    rows = (tmp_path / "m.csv").read_text().splitlines()
    assert len(rows) == 3 and all(len(r.split(",")) == 3 for r in rows)
    write_fraction_csv(frac_above(sim, 0.5), tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "step,fraction" and lines[1] == "0,0.500000"
