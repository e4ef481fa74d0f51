"""Momentum-contrast pre-training of the CSI feature encoder.

A query encoder and a momentum (key) encoder share the architecture

    conv3x3(1->4) -> ReLU -> maxpool 2   (30x30 -> 15x15)
    conv3x3(4->4) -> ReLU -> maxpool 3   (15x15 -> 5x5)
    flatten                               -> feature, 100-d
    fc 100->100 -> ReLU -> fc 100->32 -> L2 normalize -> embedding

Queries are embedded by the query encoder, their same-RP positives by the
key encoder.  Each query is scored against its positive and the keys held in
a FIFO queue with InfoNCE; only the query encoder receives gradients, the key
encoder tracks it as an exponential moving average, and the batch's keys are
enqueued after the update.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .imaging import PretrainBatch, PretrainCorpus, draw_batch
from .tensor import AdamState, DegenerateVectorError, ShapeError, Tape, Var, adam_step, kaiming_uniform

logger = logging.getLogger(__name__)

IMAGE_SHAPE = (30, 30)
FEATURE_DIM = 100
EMBED_DIM = 32
POOL_WINDOWS = (2, 3)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or a degenerate embedding."""


@dataclass
class EncoderState:
    """Parameters of the feature encoder and (optionally) its projection head."""

    params: dict[str, np.ndarray]
    projection: bool = True
    role: str = "query"

    @classmethod
    def init(cls, rng: np.random.Generator, projection: bool = True, dtype=np.float32) -> "EncoderState":
        p = {
            "conv1.w": kaiming_uniform(rng, (4, 1, 3, 3), 9, dtype),
            "conv1.b": np.zeros(4, dtype),
            "conv2.w": kaiming_uniform(rng, (4, 4, 3, 3), 36, dtype),
            "conv2.b": np.zeros(4, dtype),
        }
        if projection:
            p["proj1.w"] = kaiming_uniform(rng, (FEATURE_DIM, FEATURE_DIM), FEATURE_DIM, dtype)
            p["proj1.b"] = np.zeros(FEATURE_DIM, dtype)
            p["proj2.w"] = kaiming_uniform(rng, (EMBED_DIM, FEATURE_DIM), FEATURE_DIM, dtype)
            p["proj2.b"] = np.zeros(EMBED_DIM, dtype)
        return cls(p, projection)

    @property
    def arch(self) -> str:
        head = f"proj{FEATURE_DIM}-{EMBED_DIM}" if self.projection else "noproj"
        return f"cssloc-encoder/c1x4p2-c4x4p3/{head}"

    @property
    def embed_dim(self) -> int:
        return EMBED_DIM if self.projection else FEATURE_DIM

    def copy(self, role: str | None = None) -> "EncoderState":
        return EncoderState({k: v.copy() for k, v in self.params.items()}, self.projection, role or self.role)

    def astype(self, dtype) -> "EncoderState":
        return EncoderState({k: v.astype(dtype) for k, v in self.params.items()}, self.projection, self.role)

    def encoder_only(self) -> "EncoderState":
        """The transferable part: convolution stack without the projection head."""
        return EncoderState({k: v for k, v in self.params.items() if k.startswith("conv")}, False, self.role)

    def checksum(self) -> int:
        import zlib

        crc = 0
        for k in sorted(self.params):
            crc = zlib.crc32(self.params[k].tobytes(), zlib.crc32(k.encode(), crc))
        return crc

    def features(self, images: np.ndarray, chunk: int = 512) -> np.ndarray:
        """Feature vectors (N, 100) for normalized images (N, 30, 30), no tape."""
        return self._batched(images, chunk, 0)

    def embed(self, images: np.ndarray, chunk: int = 512) -> np.ndarray:
        return self._batched(images, chunk, 1)

    def _batched(self, images, chunk, which):
        images = np.asarray(images)
        if images.ndim == 2:
            images = images[None]
        tape = Tape()
        p = {k: tape.constant(v) for k, v in self.params.items()}
        out = []
        for i in range(0, len(images), chunk):
            x = tape.constant(images[i : i + chunk, None].astype(self.dtype, copy=False))
            out.append(forward(tape, p, x, self.projection and which == 1)[which].value)
        return np.concatenate(out)

    @property
    def dtype(self):
        return self.params["conv1.w"].dtype


def forward(tape: Tape, p: dict[str, Var], x: Var, projection: bool = True) -> tuple[Var, Var]:
    """Feature and embedding for a batch ``x`` of shape (N, 1, 30, 30)."""
    if x.value.ndim != 4 or x.value.shape[1:] != (1, *IMAGE_SHAPE):
        raise ShapeError(f"encoder expects (N, 1, 30, 30) images, got {x.value.shape}")
    h = tape.maxpool2d(tape.relu(tape.conv2d(x, p["conv1.w"], p["conv1.b"])), POOL_WINDOWS[0])
    h = tape.maxpool2d(tape.relu(tape.conv2d(h, p["conv2.w"], p["conv2.b"])), POOL_WINDOWS[1])
    v = tape.flatten(h)
    z = v
    if projection:
        z = tape.relu(tape.linear(v, p["proj1.w"], p["proj1.b"]))
        z = tape.linear(z, p["proj2.w"], p["proj2.b"])
    return v, tape.l2_normalize(z)


def encode(enc: EncoderState, img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Feature (100,) and unit-norm embedding for one normalized 30x30 image."""
    img = np.asarray(img)
    if img.shape != IMAGE_SHAPE:
        raise ShapeError(f"expected a 30x30 image, got {img.shape}")
    tape = Tape()
    p = {k: tape.constant(v) for k, v in enc.params.items()}
    v, z = forward(tape, p, tape.constant(img[None, None].astype(enc.dtype)), enc.projection)
    return v.value[0], z.value[0]


def momentum_update(key_enc: EncoderState, query_enc: EncoderState, momentum: float) -> None:
    """In place: ``key_enc <- momentum * key_enc + (1 - momentum) * query_enc`` for every parameter tensor."""
    if key_enc.params.keys() != query_enc.params.keys():
        raise ShapeError("encoder states hold different parameter sets")
    for k, t in query_enc.params.items():
        x = key_enc.params[k]
        if x.shape != t.shape:
            raise ShapeError(f"{k}: {x.shape} vs {t.shape}")
        x *= momentum
        x += (1 - momentum) * t


class KeyQueue:
    """Fixed-capacity FIFO of unit-norm key embeddings."""

    def __init__(self, capacity: int, dim: int, dtype=np.float32):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self.keys = np.zeros((capacity, dim), dtype=dtype)
        self.head = 0
        self.count = 0

    def enqueue(self, keys: np.ndarray) -> None:
        keys = np.asarray(keys)
        if len(keys) > self.capacity:
            keys = keys[-self.capacity :]
        n = len(keys)
        idx = (self.head + np.arange(n)) % self.capacity
        self.keys[idx] = keys
        self.head = (self.head + n) % self.capacity
        self.count = min(self.count + n, self.capacity)

    def stored(self) -> np.ndarray:
        """Stored keys in the order they were enqueued, oldest first."""
        if self.count < self.capacity:
            return self.keys[: self.count].copy()
        return np.roll(self.keys, -self.head, axis=0)

    def negatives(self) -> np.ndarray:
        """Stored keys without reordering (the set is what the loss needs)."""
        return self.keys[: self.count]


@dataclass
class PretrainConfig:
    batch_size: int = 256
    epochs: int = 150
    temperature: float = 0.03
    momentum: float = 0.99
    queue_size: int = 4096
    lr: float = 5e-3
    weight_decay: float = 5e-4
    seed: int = 0
    projection: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")
        if self.queue_size < self.batch_size:
            raise ValueError("queue size must be >= batch size")
        if self.epochs < 1 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("epochs >= 1, lr > 0 and weight_decay >= 0 required")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class IterStats:
    iteration: int
    epoch: int
    loss: float
    pos_sim: float
    neg_sim: float
    embed_var: float


class MomentumContrast:
    """One pre-training run: both encoders, the key queue and the optimizer."""

    def __init__(self, cfg: PretrainConfig, dtype=np.float32):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.query_enc = EncoderState.init(self.rng, cfg.projection, dtype)
        self.key_enc = self.query_enc.copy(role="momentum")
        self.queue = KeyQueue(cfg.queue_size, self.query_enc.embed_dim, dtype)
        self.opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.momentum = cfg.momentum
        self.temperature = cfg.temperature
        self.iteration = 0

    def negatives_for(self, batch_size: int) -> np.ndarray | None:
        """Queue contents once it holds a batch worth of keys, else None (in-batch)."""
        if self.queue.count >= batch_size:
            return self.queue.negatives()
        return None

    def loss_and_grads(
        self, batch: PretrainBatch, negatives: np.ndarray | None = None, track_momentum: bool = False
    ) -> tuple[float, dict[str, np.ndarray], dict]:
        """InfoNCE loss of a batch and its gradient with respect to the query encoder.

        With ``track_momentum`` the momentum parameters are also put on the tape
        as trainable leaves; their keys are detached, so they get no gradient.
        The returned diagnostics include the detached keys and their gradients.
        """
        tape = Tape()
        qp = {k: tape.param(v, k) for k, v in self.query_enc.params.items()}
        kp = {k: (tape.param(v, k) if track_momentum else tape.constant(v)) for k, v in self.key_enc.params.items()}
        dtype = self.query_enc.dtype
        _, q = forward(tape, qp, tape.constant(batch.queries[:, None].astype(dtype, copy=False)), self.cfg.projection)
        _, k = forward(tape, kp, tape.constant(batch.positives[:, None].astype(dtype, copy=False)), self.cfg.projection)
        k = tape.detach(k)
        loss = tape.info_nce(q, k, negatives, self.temperature)
        tape.backward(loss)
        grads = {name: v.grad for name, v in qp.items() if v.grad is not None}
        qv, kv = q.value, k.value
        pos = float(np.einsum("nd,nd->n", qv, kv).mean())
        if negatives is None:
            sims = qv @ kv.T
            neg = float((sims.sum() - np.trace(sims)) / max(len(qv) * (len(qv) - 1), 1))
        else:
            neg = float((qv @ negatives.mean(axis=0)).mean())
        info = {
            "keys": kv,
            "pos_sim": pos,
            "neg_sim": neg,
            "embed_var": float(qv.var(axis=0).mean()),
            "momentum_grads": {n: v.grad for n, v in kp.items()} if track_momentum else {},
        }
        return float(loss.value), grads, info

    def step(self, batch: PretrainBatch, epoch: int = 0) -> IterStats:
        negatives = self.negatives_for(len(batch.queries))
        try:
            loss, grads, info = self.loss_and_grads(batch, negatives)
        except DegenerateVectorError as exc:
            raise DivergenceError(f"iteration {self.iteration}: embedding collapsed to zero ({exc})") from exc
        if not math.isfinite(loss):
            raise DivergenceError(f"iteration {self.iteration}: loss is {loss}")
        adam_step(self.query_enc.params, grads, self.opt)
        momentum_update(self.key_enc, self.query_enc, self.momentum)
        self.queue.enqueue(info["keys"])
        self.iteration += 1
        return IterStats(self.iteration, epoch, loss, info["pos_sim"], info["neg_sim"], info["embed_var"])


@dataclass
class PretrainResult:
    encoder: EncoderState
    momentum_encoder: EncoderState
    config: PretrainConfig
    history: list[IterStats] = field(default_factory=list)
    collapsed: bool = False
    epochs_completed: int = 0

    def epoch_losses(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for s in self.history:
            by_epoch.setdefault(s.epoch, []).append(s.loss)
        return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]


COLLAPSE_VARIANCE = 1e-6
COLLAPSE_EPOCHS = 3


def pretrain(
    corpus: PretrainCorpus,
    cfg: PretrainConfig,
    log_path: str | Path | None = None,
    on_epoch: Callable[[int, list[IterStats]], None] | None = None,
    stop_on_collapse: bool = True,
) -> PretrainResult:
    """Run the full training loop and return the query-side encoder.

    An epoch is ``ceil(len(corpus) / batch_size)`` iterations.  The run is
    flagged as collapsed when the epoch-mean embedding variance stays below
    1e-6 for three consecutive epochs.  A non-finite loss raises
    :class:`DivergenceError`.
    """
    model = MomentumContrast(cfg)
    iters = math.ceil(len(corpus) / cfg.batch_size)
    result = PretrainResult(model.query_enc, model.key_enc, cfg)
    low_var = 0
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "epoch", "loss", "pos_sim", "neg_sim", "embed_var"])
    try:
        for epoch in range(cfg.epochs):
            stats = []
            for _ in range(iters):
                s = model.step(draw_batch(corpus, cfg.batch_size, model.rng), epoch)
                stats.append(s)
                if writer:
                    writer.writerow([s.iteration, s.epoch, repr(s.loss), repr(s.pos_sim), repr(s.neg_sim), repr(s.embed_var)])
            result.history.extend(stats)
            result.epochs_completed = epoch + 1
            if on_epoch:
                on_epoch(epoch, stats)
            low_var = low_var + 1 if np.mean([s.embed_var for s in stats]) < COLLAPSE_VARIANCE else 0
            if low_var >= COLLAPSE_EPOCHS:
                if not result.collapsed:
                    logger.warning("embedding variance below %g for %d epochs: collapsed", COLLAPSE_VARIANCE, low_var)
                result.collapsed = True
                if stop_on_collapse:
                    break
    finally:
        if fh:
            fh.close()
    return result
