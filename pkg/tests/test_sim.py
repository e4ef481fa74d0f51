from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cssloc.sim import (
    BANDWIDTH_HZ,
    DYNAMICS,
    ConfigurationError,
    DynamicsProfile,
    Scenario,
    build_scenario,
    channel_at,
    generate_dataset,
    generate_queries,
    sample_csi,
    subcarrier_frequencies,
    subcarrier_offsets,
)


def single_path(rps, exponent=2.0, **kw):
    return build_scenario("los", "custom", 0, {"rp_grid": rps, "tx_positions": [[0.0, 0.0]], "path_count": 1,
                                               "path_loss_exponent": exponent, **kw})


def test_corridor_preset_is_36_rps_on_a_metre_grid():
    s = build_scenario("corridor", "corridor", 0)
    assert s.n_rps == 36
    assert s.extent == (36.0, 3.0)
    np.testing.assert_allclose(np.diff(s.rp_grid[:, 0]), 1.0)
    assert np.all(s.rp_grid[:, 1] == s.rp_grid[0, 1])


def test_hall_preset_uses_three_antennas_thirty_subcarriers():
    s = build_scenario("hall", "hall", 0)
    assert (s.n_antennas, s.n_subcarriers) == (3, 30)
    assert sample_csi(s, 0, 0).h.shape == (3, 30)


def test_same_seed_same_scenario():
    a, b = build_scenario("x", "lounge", 5), build_scenario("x", "lounge", 5)
    assert a.to_dict() == b.to_dict()
    c = build_scenario("x", "lounge", 6)
    assert a.to_dict()["sources"] != c.to_dict()["sources"]


def test_scenario_dict_round_trip():
    s = build_scenario("h", "hall", 3)
    t = Scenario.from_dict(s.to_dict())
    np.testing.assert_array_equal(sample_csi(s, 4, 2, DYNAMICS["baseline"]).h, sample_csi(t, 4, 2, DYNAMICS["baseline"]).h)


def test_subcarriers_span_the_channel():
    off = subcarrier_offsets(30)
    assert len(off) == 30 and off[-1] - off[0] <= BANDWIDTH_HZ
    np.testing.assert_allclose(np.diff(off), np.diff(off)[0])
    assert subcarrier_frequencies(30).mean() == pytest.approx(5.32e9)


def test_single_path_is_flat_in_frequency():
    s = single_path([[3.0, 4.0], [1.0, 7.0]])
    amp = sample_csi(s, 1, 0).amplitude
    np.testing.assert_allclose(amp, amp[0, 0], rtol=1e-12)


def test_free_space_amplitude_halves_at_double_distance():
    s = single_path([[2.0, 0.0], [4.0, 0.0]])
    a1 = sample_csi(s, 0, 0).amplitude.mean()
    a2 = sample_csi(s, 1, 0).amplitude.mean()
    assert a1 / a2 == pytest.approx(2.0, rel=1e-12)


@settings(max_examples=30)
@given(st.floats(1.0, 40.0), st.floats(0.01, 20.0), st.sampled_from([2.0, 3.5]))
def test_single_path_attenuation_is_monotone(d, extra, n):
    s = single_path([[d, 0.0], [d + extra, 0.0]], exponent=n)
    amps = [sample_csi(s, i, 0).amplitude.mean() for i in range(s.n_rps)]
    assert all(a >= b for a, b in zip(amps, amps[1:]))


def test_null_dynamics_match_no_dynamics():
    s = build_scenario("c", "corridor", 1)
    np.testing.assert_array_equal(sample_csi(s, 3, 7).h, sample_csi(s, 3, 7, DynamicsProfile()).h)


def test_samples_are_deterministic_and_periods_differ():
    s = build_scenario("c", "corridor", 1)
    dyn = DYNAMICS["moderate"]
    np.testing.assert_array_equal(sample_csi(s, 3, 7, dyn).h, sample_csi(s, 3, 7, dyn).h)
    assert not np.array_equal(sample_csi(s, 3, 7, dyn, period=0).h, sample_csi(s, 3, 7, dyn, period=1).h)


def test_rp_index_out_of_range():
    s = build_scenario("h", "hall", 0)
    with pytest.raises(IndexError):
        sample_csi(s, s.n_rps, 0)


@pytest.mark.parametrize("bad", [dict(noise_std=-1.0), dict(gain_drift_std=-0.1), dict(extra_path_prob=1.5)])
def test_dynamics_validation(bad):
    with pytest.raises(ConfigurationError):
        DynamicsProfile(**bad)


def test_scenario_validation():
    with pytest.raises(ConfigurationError):
        build_scenario("x", "custom", 0, {"rp_grid": [], "tx_positions": [[0, 0]]})
    with pytest.raises(ConfigurationError):
        build_scenario("x", "nowhere", 0)
    with pytest.raises(ConfigurationError):
        build_scenario("x", "custom", 0, {"rp_grid": [[1, 1], [1, 1]], "tx_positions": [[0, 0]]})
    with pytest.raises(ConfigurationError):
        build_scenario("x", "hall", 0, {"rp_grid": [[9.0, 1.0]]})


def test_max_rps_truncates():
    s = build_scenario("c", "corridor", 0, {"max_rps": 8})
    assert s.n_rps == 8
    assert np.all(s.test_points[:, 0] <= s.rp_grid[:, 0].max())


def test_custom_scenario_with_multipath_gets_finite_geometry():
    s = build_scenario("c", "custom", 0, {"rp_grid": [[1.0, 1.0], [2.0, 1.0]], "tx_positions": [[0.5, 0.5]], "path_count": 4})
    assert np.all(np.isfinite(s.sources))
    assert np.all(np.isfinite(sample_csi(s, 1, 0).h))


def test_dataset_counts_and_image_shape():
    s = build_scenario("c", "corridor", 0)
    rmap = generate_dataset(s, 10, 10)
    assert len(rmap) == 360
    assert rmap.images.shape[1:] == (30, 30)
    assert rmap.images.dtype == np.float32
    np.testing.assert_array_equal(np.bincount(rmap.labels), 10)


def test_noise_raises_per_rp_variance():
    s = build_scenario("h", "hall", 2)
    quiet = generate_dataset(s, 4, 10)
    noisy = generate_dataset(s, 4, 10, DynamicsProfile(noise_std=0.05))
    for rp in range(s.n_rps):
        assert noisy.images[noisy.labels == rp].var() > quiet.images[quiet.labels == rp].var()


@pytest.mark.parametrize("preset", ["corridor", "hall", "lounge"])
def test_neighbouring_rps_look_alike(preset):
    s = build_scenario(preset, preset, 0)
    amp = np.stack([sample_csi(s, i, 0).amplitude.ravel() for i in range(s.n_rps)])
    grid = np.rint((s.rp_grid - s.rp_grid.min(axis=0)) / s.grid_spacing).astype(int)
    steps = np.abs(grid[:, None] - grid[None]).sum(-1)
    dist = np.linalg.norm(amp[:, None] - amp[None], axis=-1)
    assert dist[steps == 1].mean() < dist[steps >= 5].mean()


def test_queries_sit_off_the_rp_grid():
    s = build_scenario("c", "corridor", 0)
    qs = generate_queries(s, 2)
    assert len(qs) == 2 * len(s.test_points)
    assert qs.images.dtype == np.float32
    gaps = np.min(np.linalg.norm(qs.positions[:, None] - s.rp_grid[None], axis=-1), axis=1)
    np.testing.assert_allclose(gaps, 0.5)


def test_channel_noise_statistics():
    s = single_path([[3.0, 0.0]])
    rng = np.random.default_rng(0)
    clean = channel_at(s, s.rp_grid[0])
    resid = np.stack([channel_at(s, s.rp_grid[0], DynamicsProfile(noise_std=0.1), rng) - clean for _ in range(400)])
    # circular complex noise: E|n|^2 = noise_std^2
    assert np.mean(np.abs(resid) ** 2) == pytest.approx(0.01, rel=0.05)
