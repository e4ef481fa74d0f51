from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cssloc.imaging import (
    CorpusError,
    CsiImage,
    NormStats,
    PairingError,
    PretrainCorpus,
    denormalize,
    draw_batch,
    make_image,
    normalize,
)
from cssloc.sim import CsiSample, build_scenario, generate_dataset


def samples(rng, n=10, rp=0, ant=3, sub=30):
    return [CsiSample(rp, t, rng.normal(size=(ant, sub)) + 1j * rng.normal(size=(ant, sub))) for t in range(n)]


def test_ten_samples_make_a_30x30_image():
    img = make_image(samples(np.random.default_rng(0)), "s", samples_per_image=10)
    assert img.pixels.shape == (30, 30)
    assert img.rp_index == 0 and img.scenario_id == "s"


def test_zero_and_constant_samples():
    zero = [CsiSample(1, t, np.zeros((3, 30), complex)) for t in range(10)]
    assert np.all(make_image(zero).pixels == 0)
    c = 0.37
    const = [CsiSample(1, t, np.full((3, 30), c * np.exp(0.4j))) for t in range(10)]
    np.testing.assert_allclose(make_image(const).pixels, c, rtol=1e-15)


@settings(max_examples=25)
@given(st.integers(1, 12), st.integers(1, 4), st.integers(1, 31), st.integers(0, 1000))
def test_pixel_provenance_block_stitching(n, ant, sub, seed):
    smp = samples(np.random.default_rng(seed), n, 0, ant, sub)
    px = make_image(smp).pixels
    assert px.shape == (ant * n, sub)
    for r in range(ant * n):
        a, t = divmod(r, n)
        np.testing.assert_array_equal(px[r], np.abs(smp[t].h[a]))


def test_mixed_rps_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(PairingError):
        make_image(samples(rng, 2, 0) + samples(rng, 2, 1))
    with pytest.raises(ValueError):
        make_image(samples(rng, 4), samples_per_image=5)


def test_normalize_mean_image_is_zero_and_round_trips():
    stats = NormStats(2.5, 0.5)
    img = CsiImage(np.full((30, 30), 2.5), 0)
    assert np.all(normalize(img, stats).pixels == 0)
    rng = np.random.default_rng(0)
    img = CsiImage(rng.uniform(0, 5, (30, 30)), 3)
    np.testing.assert_allclose(denormalize(normalize(img, stats), stats).pixels, img.pixels, atol=1e-6)


def test_zero_std_skips_scaling():
    stats = NormStats(1.0, 0.0)
    np.testing.assert_array_equal(stats.apply(np.array([3.0])), [2.0])


def test_fitted_stats_standardize_the_corpus():
    rmap = generate_dataset(build_scenario("h", "hall", 0), 4)
    stats = NormStats.fit(rmap.images)
    z = stats.apply(rmap.images.astype(np.float64))
    assert abs(z.mean()) < 1e-6
    assert abs(z.std() - 1) < 1e-6


def _corpus(per_group, n_groups=3, scenarios=("a",)):
    images, rps = [], []
    for sc in scenarios:
        for g in range(n_groups):
            for i in range(per_group):
                images.append(CsiImage(np.full((30, 30), hash((sc, g, i)) % 997, float), g, sc))
    return PretrainCorpus.from_images(images), images


def test_batch_pairs_share_rp_and_scenario():
    corpus, images = _corpus(5, 4, ("a", "b"))
    batch = draw_batch(corpus, 4, np.random.default_rng(0))
    assert batch.queries.shape == (4, 30, 30)
    for q, p in zip(batch.query_index, batch.positive_index):
        assert q != p
        assert (images[q].scenario_id, images[q].rp_index) == (images[p].scenario_id, images[p].rp_index)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(1, 5), st.integers(1, 64), st.integers(0, 10_000))
def test_draw_batch_never_crosses_groups(per_group, n_groups, batch, seed):
    corpus, _ = _corpus(per_group, n_groups, ("a", "b"))
    b = draw_batch(corpus, batch, np.random.default_rng(seed))
    assert np.all(corpus.groups[b.query_index] == corpus.groups[b.positive_index])
    assert np.all(b.query_index != b.positive_index)


def test_two_images_per_rp_force_the_other():
    corpus, _ = _corpus(2, 6)
    b = draw_batch(corpus, 200, np.random.default_rng(1))
    partner = {0: 1, 1: 0}
    for q, p in zip(b.query_index, b.positive_index):
        assert p - (q - q % 2) == partner[q % 2]


def test_query_frequency_is_uniform_over_rps():
    corpus, _ = _corpus(10, 36)
    n = 10_000
    counts = np.zeros(36)
    rng = np.random.default_rng(7)
    for _ in range(n // 250):
        b = draw_batch(corpus, 250, rng)
        counts += np.bincount(corpus.groups[b.query_index], minlength=36)
    p = 1 / 36
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_lonely_images_rejected():
    with pytest.raises(CorpusError):
        _corpus(1)


def test_from_maps_pools_periods_by_site():
    s = build_scenario("h", "hall", 0)
    first = generate_dataset(s, 2)
    later = generate_dataset(s, 1, period=5)
    other = generate_dataset(build_scenario("c", "corridor", 0, {"max_rps": 4}), 2)
    corpus = PretrainCorpus.from_maps([first, later, other])
    assert len(corpus) == len(first) + len(later) + len(other)
    assert corpus.n_groups == s.n_rps + 4
    g = corpus.groups
    np.testing.assert_array_equal(g[: len(first)][first.labels == 3][0], g[len(first) : len(first) + len(later)][later.labels == 3])
