"""CSI image construction and the unlabeled pre-training corpus.

An image stacks, for each receive antenna, the amplitude rows of consecutive
samples: rows ``a * S .. (a + 1) * S - 1`` belong to antenna ``a`` where ``S``
is the number of samples per image.  Antenna blocks are stitched vertically
in antenna order, giving ``(n_antennas * S) x n_subcarriers`` pixels
(30 x 30 with the defaults).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .sim import CsiSample


class PairingError(ValueError):
    """Samples or images from different RPs were combined."""


class CorpusError(ValueError):
    """The pre-training corpus cannot provide positive pairs."""


@dataclass
class CsiImage:
    pixels: np.ndarray
    rp_index: int
    scenario_id: str = ""


def make_image(samples: Sequence["CsiSample"], scenario_id: str = "", samples_per_image: int | None = None) -> CsiImage:
    if not samples:
        raise ValueError("make_image needs at least one sample")
    if samples_per_image is not None and len(samples) != samples_per_image:
        raise ValueError(f"expected {samples_per_image} samples, got {len(samples)}")
    rps = {s.rp_index for s in samples}
    if len(rps) != 1:
        raise PairingError(f"samples from several RPs: {sorted(rps)}")
    amp = np.stack([s.amplitude for s in samples])  # (S, A, K)
    if amp.ndim != 3:
        raise ValueError("every sample must be an (antennas x subcarriers) matrix")
    n_samples, n_ant, n_sub = amp.shape
    pixels = amp.transpose(1, 0, 2).reshape(n_ant * n_samples, n_sub)
    return CsiImage(pixels, rps.pop(), scenario_id)


@dataclass(frozen=True)
class NormStats:
    """Scalar corpus mean and std used to standardize every pixel."""

    mean: float
    std: float

    @classmethod
    def fit(cls, images: np.ndarray) -> "NormStats":
        x = np.asarray(images, dtype=np.float64)
        return cls(float(x.mean()), float(x.std()))

    def _scale(self) -> float:
        return self.std if self.std > 0 else 1.0

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        return (pixels - self.mean) / self._scale()

    def invert(self, pixels: np.ndarray) -> np.ndarray:
        return pixels * self._scale() + self.mean


def normalize(img: CsiImage, stats: NormStats) -> CsiImage:
    return CsiImage(stats.apply(img.pixels), img.rp_index, img.scenario_id)


def denormalize(img: CsiImage, stats: NormStats) -> CsiImage:
    return CsiImage(stats.invert(img.pixels), img.rp_index, img.scenario_id)


@dataclass
class PretrainBatch:
    query_index: np.ndarray
    positive_index: np.ndarray
    queries: np.ndarray
    positives: np.ndarray


class PretrainCorpus:
    """Images pooled across scenarios, grouped by ``(scenario_id, rp_index)``.

    The group id is used only to pick positives; it never reaches the loss.
    """

    def __init__(self, images: np.ndarray, groups: np.ndarray):
        images = np.asarray(images)
        groups = np.asarray(groups)
        if images.ndim != 3 or len(images) != len(groups):
            raise ValueError("images must be (N, H, W) with one group id per image")
        self.images = images
        self.groups = groups
        uniq, inverse, counts = np.unique(groups, return_inverse=True, return_counts=True)
        if np.any(counts < 2):
            lonely = uniq[counts < 2].tolist()
            raise CorpusError(f"groups with a single image cannot form positives: {lonely[:5]}")
        order = np.argsort(inverse, kind="stable")
        self._members = order
        self._start = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self._count = counts
        self._group_of = inverse
        self._rank = np.empty(len(groups), dtype=np.int64)
        self._rank[order] = np.arange(len(groups)) - np.repeat(self._start, counts)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def n_groups(self) -> int:
        return len(self._count)

    @classmethod
    def from_images(cls, images: Sequence[CsiImage]) -> "PretrainCorpus":
        keys = {}
        groups = [keys.setdefault((im.scenario_id, im.rp_index), len(keys)) for im in images]
        return cls(np.stack([im.pixels for im in images]), np.asarray(groups))

    @classmethod
    def from_maps(cls, maps, stats: NormStats | None = None) -> "PretrainCorpus":
        """Pool the images of several radio maps; labels become anonymous group ids.

        Images share a group when they come from the same (scenario, RP), so
        collections of one site from different periods pool into one group.
        """
        pixels, keys = [], []
        for m in maps:
            pixels.append(m.images)
            keys += [(m.scenario_id, int(r)) for r in m.rp_ids[m.labels]]
        index: dict[tuple[str, int], int] = {}
        groups = np.array([index.setdefault(k, len(index)) for k in keys], dtype=np.int64)
        images = np.concatenate(pixels)
        if stats is not None:
            images = stats.apply(images)
        return cls(images.astype(np.float32), groups)


def draw_batch(corpus: PretrainCorpus, batch_size: int, rng: np.random.Generator) -> PretrainBatch:
    """Uniform queries, each paired with a uniformly chosen other image of its group."""
    n = len(corpus)
    q = rng.integers(n, size=batch_size)
    g = corpus._group_of[q]
    cnt = corpus._count[g]
    # skipping the query's own rank makes every other member equally likely
    shift = 1 + rng.integers(cnt - 1)
    rank = (corpus._rank[q] + shift) % cnt
    p = corpus._members[corpus._start[g] + rank]
    return PretrainBatch(q, p, corpus.images[q], corpus.images[p])
