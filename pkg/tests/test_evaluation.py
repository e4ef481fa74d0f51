from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cssloc.downstream import RadioMap, train_predictor
from cssloc.evaluation import (
    DENSITIES,
    LADDER,
    OPERATING_DENSITY,
    DeskSetup,
    cluster_quality,
    compute_report,
    evaluate_predictor,
    probe_rmse,
    run_density_sweep,
    run_knn_robustness,
    run_param_sweeps,
    run_robustness,
    write_cdf_csv,
    write_cdf_svg,
    write_summary,
    write_sweeps_csv,
)
from cssloc.imaging import NormStats
from cssloc.pretrain import EncoderState, PretrainConfig
from cssloc.sim import DYNAMICS, DynamicsProfile


@pytest.fixture(scope="module")
def tiny():
    """A small corridor-only setup that keeps protocol tests fast."""
    return DeskSetup.build(0, images_per_rp=3, presets=("corridor",), unlabeled=(), query_images=1)


@pytest.fixture(scope="module")
def random_encoder():
    return EncoderState.init(np.random.default_rng(1000)).encoder_only()


# -- error report ---------------------------------------------------------------------


def test_perfect_estimates_give_zero_statistics():
    truth = np.random.default_rng(0).uniform(0, 10, (7, 2))
    rep = compute_report(truth.copy(), truth)
    assert rep.rmse == rep.mae == rep.std == rep.median == rep.p80 == 0.0


def test_three_four_example():
    rep = compute_report([[3.0, 0.0], [0.0, 4.0]], [[0.0, 0.0], [0.0, 0.0]])
    assert rep.mae == 3.5
    assert rep.rmse == pytest.approx(math.sqrt(12.5), abs=1e-12)
    assert rep.rmse == pytest.approx(3.53553, abs=1e-5)
    assert rep.std == pytest.approx(0.5, abs=1e-12)
    assert rep.median == 3.5
    assert rep.p80 == pytest.approx(3.8, abs=1e-12)  # linear interpolation between 3 and 4


def test_report_rejects_bad_input():
    with pytest.raises(ValueError):
        compute_report(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        compute_report(np.zeros((3, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        compute_report([[np.nan, 0.0]], [[0.0, 0.0]])


points = st.integers(1, 60).flatmap(
    lambda n: st.tuples(*(hnp.arrays(np.float64, (n, 2), elements=st.floats(-1e3, 1e3)) for _ in range(2)))
)


@settings(max_examples=100)
@given(points)
def test_report_identities(pair):
    est, truth = pair
    rep = compute_report(est, truth)
    e = rep.errors
    assert rep.rmse >= rep.mae >= 0
    scale = max(1.0, float(np.mean(e**2)))
    assert abs(rep.rmse**2 - np.mean(e**2)) <= 1e-9 * scale
    assert abs(rep.std**2 - (rep.rmse**2 - rep.mae**2)) <= 1e-9 * scale
    assert rep.cdf[-1, 1] == 1.0
    assert np.all(np.diff(rep.cdf[:, 0]) >= 0) and np.all(np.diff(rep.cdf[:, 1]) > 0)
    assert rep.median == pytest.approx(np.interp(0.5, (np.arange(len(e))) / max(len(e) - 1, 1), np.sort(e)), abs=1e-9)


def test_median_matches_rayleigh_within_monte_carlo_band():
    # isotropic Gaussian position error with scale s: error is Rayleigh, median s*sqrt(2 ln 2)
    s, n = 1.7, 1000
    med = s * math.sqrt(2 * math.log(2))
    density_at_median = med / s**2 * 0.5
    se = 1 / (2 * density_at_median * math.sqrt(n))
    for seed in range(5):
        est = np.random.default_rng(seed).normal(scale=s, size=(n, 2))
        rep = compute_report(est, np.zeros((n, 2)))
        assert abs(rep.median - med) <= 3 * se


# -- protocols -------------------------------------------------------------------------


def test_full_density_uses_every_rp(tiny, random_encoder):
    res = run_density_sweep(tiny, random_encoder, densities=(1.0,), linear_probe=True, epochs=3)
    pred = train_predictor(random_encoder, tiny.radio_map, tiny.stats, epochs=3, linear_probe=True, seed=0)
    assert pred.n_rps == tiny.radio_map.n_rps == 36
    assert res.rmse == [evaluate_predictor(random_encoder, pred, tiny.queries, tiny.stats).rmse]


def test_density_sweep_shape_and_operating_point(tiny, random_encoder):
    res = run_density_sweep(tiny, random_encoder, linear_probe=True, epochs=2)
    assert res.values == list(DENSITIES) and len(res.rmse) == 5
    assert res.meta["operating_point"] == OPERATING_DENSITY == 0.6
    assert res.rmse[0] == probe_rmse(random_encoder, tiny, True, 0.2, epochs=2)


def test_null_dynamics_robustness_equals_clean_report(tiny, random_encoder):
    clean = DeskSetup.build(0, images_per_rp=3, presets=("corridor",), unlabeled=(), query_images=1, dynamics=None)
    pred = train_predictor(random_encoder, clean.radio_map, clean.stats, epochs=3, seed=0)
    a = run_robustness(clean.scenario, None, random_encoder, pred, clean.stats, period=1, query_images=1)
    b = evaluate_predictor(random_encoder, pred, clean.queries, clean.stats)
    np.testing.assert_array_equal(a.errors, b.errors)
    # with no dynamics the collection period is irrelevant
    c = run_robustness(clean.scenario, DynamicsProfile(), random_encoder, pred, clean.stats, period=9, query_images=1)
    np.testing.assert_array_equal(a.errors, c.errors)


def test_knn_error_grows_along_the_noise_ladder(tiny):
    rmse = {lvl: np.mean([run_knn_robustness(tiny.scenario, DYNAMICS[lvl], tiny.radio_map, period=p, query_images=1).rmse
                          for p in (2, 6, 7)]) for lvl in LADDER}
    assert rmse["mild"] <= rmse["moderate"] <= rmse["severe"]


def test_param_sweep_is_seed_reproducible(tiny):
    base = PretrainConfig(batch_size=32, queue_size=64)
    kw = dict(seeds=(0,), base=base, epochs=1, setups={0: tiny})
    a = run_param_sweeps({"momentum": [0.0, 0.9]}, **kw)
    b = run_param_sweeps({"momentum": [0.0, 0.9]}, **kw)
    assert [r.rows() for r in a] == [r.rows() for r in b]
    assert len(a[0].rmse) == len(a[0].collapsed) == 2
    assert a[0].meta == {"epochs": 1, "seeds": [0]}


def test_unknown_sweep_axis(tiny):
    with pytest.raises(ValueError):
        run_param_sweeps({"colour": [1]}, setups={0: tiny}, epochs=1)


# -- cluster quality ------------------------------------------------------------------


class _Identity:
    def embed(self, x):
        return x.reshape(len(x), -1)


def test_separated_clusters_score_near_one():
    rng = np.random.default_rng(0)
    centers = rng.normal(scale=100, size=(6, 30 * 30))
    imgs = np.concatenate([c + rng.normal(scale=1e-3, size=(5, 900)) for c in centers]).reshape(-1, 30, 30)
    rmap = RadioMap(imgs, np.repeat(np.arange(6), 5), np.arange(12.0).reshape(6, 2))
    score = cluster_quality(_Identity(), rmap, NormStats(0.0, 0.0))
    assert 0.999 < score <= 1.0


def test_single_rp_silhouette_is_an_error():
    rmap = RadioMap(np.zeros((4, 30, 30)), np.zeros(4), [[0.0, 0.0]])
    with pytest.raises(ValueError):
        cluster_quality(_Identity(), rmap, NormStats(0.0, 1.0))


def test_silhouette_of_an_encoder_is_bounded(tiny, random_encoder):
    enc = EncoderState.init(np.random.default_rng(1000))
    assert -1.0 <= cluster_quality(enc, tiny.radio_map, tiny.stats) <= 1.0


# -- writers ------------------------------------------------------------------------------


def test_writers(tmp_path, tiny):
    rep = compute_report([[3.0, 0.0], [0.0, 4.0]], [[0.0, 0.0], [0.0, 0.0]])
    write_cdf_csv(rep, tmp_path / "cdf.csv")
    rows = list(csv.reader(open(tmp_path / "cdf.csv")))
    assert rows == [["error_m", "cumulative_fraction"], ["3.0", "0.5"], ["4.0", "1.0"]]
    write_cdf_svg({"a": rep}, tmp_path / "cdf.svg")
    assert (tmp_path / "cdf.svg").read_text().lstrip().startswith("<?xml")
    res = run_density_sweep(tiny, EncoderState.init(np.random.default_rng(0)).encoder_only(), (0.5, 1.0), True, epochs=1)
    write_sweeps_csv([res], tmp_path / "density.csv")
    got = list(csv.DictReader(open(tmp_path / "density.csv")))
    assert [r["value"] for r in got] == ["0.5", "1.0"] and all(r["axis"] == "density" for r in got)
    write_summary(tmp_path / "s.json", result=res, arr=np.arange(3), x=np.float32(0.5))
    payload = json.loads((tmp_path / "s.json").read_text())
    assert payload["arr"] == [0, 1, 2] and payload["x"] == 0.5 and payload["result"]["axis"] == "density"
