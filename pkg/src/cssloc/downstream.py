"""Location predictor on top of a frozen encoder, and probabilistic estimates.

The predictor is a softmax classifier over the ``r`` reference points of a
radio map.  A location is the posterior-weighted centroid of the RP
coordinates, so estimates can fall between RPs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .imaging import CsiImage, NormStats
from .pretrain import FEATURE_DIM, EncoderState
from .tensor import AdamState, ShapeError, Tape, adam_step, kaiming_uniform, softmax


class DegenerateTaskError(ValueError):
    pass


@dataclass
class RadioMap:
    """Labeled fingerprints: raw images, labels 0..r-1 and one coordinate per label."""

    images: np.ndarray
    labels: np.ndarray
    rp_coords: np.ndarray
    scenario_id: str = ""
    rp_ids: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.rp_coords = np.asarray(self.rp_coords, dtype=np.float64).reshape(-1, 2)
        if self.rp_ids is None:
            self.rp_ids = np.arange(len(self.rp_coords))
        self.rp_ids = np.asarray(self.rp_ids, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("one label per image required")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.rp_coords)):
            raise ValueError("labels must index rp_coords")

    @property
    def n_rps(self) -> int:
        return len(self.rp_coords)

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_images(cls, images: Sequence[CsiImage], rp_grid: np.ndarray, scenario_id: str = "") -> "RadioMap":
        rp = np.array([im.rp_index for im in images])
        used = np.unique(rp)
        relabel = {int(u): i for i, u in enumerate(used)}
        return cls(
            np.stack([im.pixels for im in images]).astype(np.float32),
            np.array([relabel[int(r)] for r in rp]),
            np.asarray(rp_grid)[used],
            scenario_id,
            used,
        )

    def subset(self, rp_labels: np.ndarray) -> "RadioMap":
        """Keep the given labels only, relabelled contiguously in the given order."""
        rp_labels = np.asarray(rp_labels)
        lookup = -np.ones(self.n_rps, dtype=np.int64)
        lookup[rp_labels] = np.arange(len(rp_labels))
        keep = lookup[self.labels] >= 0
        return RadioMap(
            self.images[keep], lookup[self.labels[keep]], self.rp_coords[rp_labels],
            self.scenario_id, self.rp_ids[rp_labels],
        )


@dataclass
class QuerySet:
    """Unlabeled query images with their ground-truth positions."""

    images: np.ndarray
    positions: np.ndarray
    scenario_id: str = ""

    def __len__(self) -> int:
        return len(self.images)


def select_density(radio_map: RadioMap, density: float, rng: np.random.Generator) -> RadioMap:
    """Keep ``ceil(density * R)`` RPs drawn uniformly without replacement."""
    if not 0 < density <= 1:
        raise ValueError("density must lie in (0, 1]")
    n = math.ceil(round(density * radio_map.n_rps, 9))
    chosen = np.sort(rng.choice(radio_map.n_rps, size=n, replace=False))
    return radio_map.subset(chosen)


@dataclass
class PredictorState:
    params: dict[str, np.ndarray]
    rp_coords: np.ndarray
    feature_mean: np.ndarray
    feature_std: np.ndarray
    linear_probe: bool = False
    history: list[float] = field(default_factory=list)

    @property
    def n_rps(self) -> int:
        return len(self.rp_coords)

    @property
    def arch(self) -> str:
        body = "linear" if self.linear_probe else "fc100-fc32"
        return f"cssloc-predictor/{body}/r{self.n_rps}"

    @classmethod
    def init(cls, rng, rp_coords, feature_mean, feature_std, linear_probe=False, dtype=np.float32):
        r = len(rp_coords)
        if linear_probe:
            p = {"out.w": kaiming_uniform(rng, (r, FEATURE_DIM), FEATURE_DIM, dtype), "out.b": np.zeros(r, dtype)}
        else:
            p = {
                "fc1.w": kaiming_uniform(rng, (100, FEATURE_DIM), FEATURE_DIM, dtype),
                "fc1.b": np.zeros(100, dtype),
                "fc2.w": kaiming_uniform(rng, (32, 100), 100, dtype),
                "fc2.b": np.zeros(32, dtype),
                "out.w": kaiming_uniform(rng, (r, 32), 32, dtype),
                "out.b": np.zeros(r, dtype),
            }
        return cls(p, np.asarray(rp_coords, dtype=np.float64), feature_mean, feature_std, linear_probe)

    def _logits(self, tape: Tape, p, feats):
        x = tape.constant(((feats - self.feature_mean) / self.feature_std).astype(self.params["out.w"].dtype))
        if not self.linear_probe:
            x = tape.relu(tape.linear(x, p["fc1.w"], p["fc1.b"]))
            x = tape.relu(tape.linear(x, p["fc2.w"], p["fc2.b"]))
        return tape.linear(x, p["out.w"], p["out.b"])

    def logits(self, feats: np.ndarray) -> np.ndarray:
        tape = Tape()
        p = {k: tape.constant(v) for k, v in self.params.items()}
        return self._logits(tape, p, np.atleast_2d(feats)).value


@dataclass
class LocationEstimate:
    coordinates: np.ndarray
    posterior: np.ndarray
    top_label: int


def train_predictor(
    encoder: EncoderState,
    radio_map: RadioMap,
    stats: NormStats,
    epochs: int = 50,
    lr: float = 5e-3,
    batch_size: int = 64,
    linear_probe: bool = False,
    seed: int = 0,
    weight_decay: float = 0.0,
) -> PredictorState:
    """Fit a predictor by minimizing mean cross-entropy over the radio map.

    The encoder is frozen: its features are computed once without a tape and
    only the predictor parameters are optimized.  Features are standardized
    with statistics from the training map (stored in the predictor).
    """
    if radio_map.n_rps < 2:
        raise DegenerateTaskError("a radio map needs at least two RPs")
    if len(radio_map) == 0:
        raise DegenerateTaskError("empty radio map")
    feats = encoder.features(stats.apply(radio_map.images))
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    std = np.where(std > 1e-8, std, 1.0).astype(feats.dtype)
    rng = np.random.default_rng(seed)
    pred = PredictorState.init(rng, radio_map.rp_coords, mean, std, linear_probe, encoder.dtype)
    opt = AdamState(lr=lr, weight_decay=weight_decay)
    n = len(feats)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, batch_size):
            idx = order[i : i + batch_size]
            tape = Tape()
            p = {k: tape.param(v, k) for k, v in pred.params.items()}
            loss = tape.cross_entropy(pred._logits(tape, p, feats[idx]), radio_map.labels[idx])
            tape.backward(loss)
            adam_step(pred.params, {k: v.grad for k, v in p.items()}, opt)
            total += float(loss.value) * len(idx)
        pred.history.append(total / n)
    return pred


def estimate_from_posterior(posterior: np.ndarray, rp_coords: np.ndarray) -> np.ndarray:
    """Posterior-weighted centroid of the RP coordinates."""
    return np.asarray(posterior, dtype=np.float64) @ np.asarray(rp_coords, dtype=np.float64)


def localize_batch(
    encoder: EncoderState, predictor: PredictorState, images: np.ndarray, stats: NormStats
) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates (N, 2) and posteriors (N, r) for raw query images."""
    feats = encoder.features(stats.apply(np.asarray(images)))
    post = softmax(predictor.logits(feats).astype(np.float64))
    return estimate_from_posterior(post, predictor.rp_coords), post


def localize(
    encoder: EncoderState,
    predictor: PredictorState,
    img: CsiImage | np.ndarray,
    stats: NormStats,
    radio_map: RadioMap | None = None,
) -> LocationEstimate:
    pixels = img.pixels if isinstance(img, CsiImage) else np.asarray(img)
    if radio_map is not None and radio_map.n_rps != predictor.n_rps:
        raise ShapeError(f"predictor has {predictor.n_rps} outputs, radio map {radio_map.n_rps} RPs")
    coords, post = localize_batch(encoder, predictor, pixels[None], stats)
    return LocationEstimate(coords[0], post[0], int(post[0].argmax()))


def knn_baseline(radio_map: RadioMap, img: CsiImage | np.ndarray, k: int = 3) -> LocationEstimate:
    """Mean RP coordinate of the ``k`` nearest stored fingerprints (raw pixels)."""
    return knn_batch(radio_map, (img.pixels if isinstance(img, CsiImage) else np.asarray(img))[None], k)[0]


def knn_batch(radio_map: RadioMap, images: np.ndarray, k: int = 3) -> list[LocationEstimate]:
    if len(radio_map) == 0:
        raise DegenerateTaskError("empty radio map")
    if not 1 <= k <= len(radio_map):
        raise ValueError(f"k must lie in [1, {len(radio_map)}]")
    ref = radio_map.images.reshape(len(radio_map), -1).astype(np.float64)
    q = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    d2 = (q**2).sum(1)[:, None] - 2 * q @ ref.T + (ref**2).sum(1)[None, :]
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    out = []
    for row in nearest:
        votes = np.bincount(radio_map.labels[row], minlength=radio_map.n_rps) / k
        out.append(LocationEstimate(radio_map.rp_coords[radio_map.labels[row]].mean(axis=0), votes, int(votes.argmax())))
    return out
