"""Single-file containers for datasets and checkpoints.

Layout of both formats::

    magic (5 bytes) | uint32 LE header length | JSON header (UTF-8) | payload

The dataset payload is the float32 little-endian image tensor in row-major
order; labels, coordinates and normalization stats live in the header.  The
checkpoint payload concatenates float32 parameter tensors at the offsets
listed in the header's manifest.  Each header carries the CRC32 of the
payload and the CRC32 of its own raw bytes (computed with the checksum
field zeroed), both checked on load.  Files are written to a temporary sibling and
renamed into place.
"""

from __future__ import annotations

import json
import os
import re
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .downstream import PredictorState, QuerySet, RadioMap
from .imaging import NormStats
from .pretrain import EncoderState

DATASET_MAGIC = "CSSD1"
CHECKPOINT_MAGIC = "CSSC1"
_LEN = struct.Struct("<I")
_F32 = np.dtype("<f4")


class PersistenceError(Exception):
    """Base class for load failures; ``offset`` is the byte position involved."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


class MagicError(PersistenceError):
    pass


class TruncatedError(PersistenceError):
    pass


class ShapeMismatchError(PersistenceError):
    pass


class ChecksumError(PersistenceError):
    pass


class ArchitectureError(PersistenceError):
    pass


def _atomic_write(path: str | Path, blob: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


_HEADER_CRC = re.compile(rb'"header_crc32": "([0-9a-f]{8})"')
_BLANK_CRC = b'"header_crc32": "00000000"'


def _pack(magic: str, header: dict[str, Any], payload: bytes) -> bytes:
    header = {"magic": magic, **header, "payload_bytes": len(payload), "crc32": zlib.crc32(payload), "header_crc32": "0" * 8}
    hb = json.dumps(header, sort_keys=True).encode()
    hb = hb.replace(_BLANK_CRC, b'"header_crc32": "%08x"' % zlib.crc32(hb), 1)
    return magic.encode() + _LEN.pack(len(hb)) + hb + payload


def _unpack(blob: bytes, magic: str) -> tuple[dict[str, Any], bytes, int]:
    m = magic.encode()
    if blob[: len(m)] != m:
        raise MagicError(f"expected magic {magic!r}, found {blob[:len(m)]!r}", 0)
    pos = len(m)
    if len(blob) < pos + _LEN.size:
        raise TruncatedError("file ends inside the header length", len(blob))
    (hlen,) = _LEN.unpack_from(blob, pos)
    pos += _LEN.size
    if len(blob) < pos + hlen:
        raise TruncatedError("file ends inside the JSON header", len(blob))
    raw = blob[pos : pos + hlen]
    found = _HEADER_CRC.search(raw)
    if found is None or int(found.group(1), 16) != zlib.crc32(raw[: found.start()] + _BLANK_CRC + raw[found.end() :]):
        raise ChecksumError("header CRC32 mismatch", pos)
    try:
        header = json.loads(raw)
    except ValueError as exc:
        raise PersistenceError(f"unreadable header: {exc}", pos) from exc
    if not isinstance(header, dict) or header.get("magic") != magic:
        raise MagicError(f"header magic is not {magic!r}", pos)
    pos += hlen
    payload = blob[pos:]
    want = header["payload_bytes"]
    if len(payload) < want:
        raise TruncatedError(f"payload has {len(payload)} of {want} bytes", pos + len(payload))
    if len(payload) > want:
        raise ShapeMismatchError(f"{len(payload) - want} trailing bytes after payload", pos + want)
    if zlib.crc32(payload) != header["crc32"]:
        raise ChecksumError("payload CRC32 mismatch", pos)
    return header, payload, pos


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class DatasetFile:
    data: RadioMap | QuerySet
    stats: NormStats | None = None
    seed: int | None = None
    scenario: dict | None = None
    meta: dict = field(default_factory=dict)


def write_dataset(
    path: str | Path,
    data: RadioMap | QuerySet,
    stats: NormStats | None = None,
    seed: int | None = None,
    scenario: dict | None = None,
    meta: dict | None = None,
) -> None:
    images = np.ascontiguousarray(data.images, dtype=_F32)
    header: dict[str, Any] = {
        "shape": list(images.shape),
        "dtype": "<f4",
        "scenario_id": data.scenario_id,
        "scenario": scenario,
        "norm": None if stats is None else {"mean": stats.mean, "std": stats.std},
        "seed": seed,
        "meta": meta or {},
    }
    if isinstance(data, RadioMap):
        header["kind"] = "radio_map"
        header["labels"] = data.labels.tolist()
        header["rp_coords"] = data.rp_coords.tolist()
        header["rp_ids"] = data.rp_ids.tolist()
    else:
        header["kind"] = "queries"
        header["positions"] = np.asarray(data.positions, dtype=np.float64).tolist()
    _atomic_write(path, _pack(DATASET_MAGIC, header, images.tobytes()))


def read_dataset(path: str | Path) -> DatasetFile:
    blob = Path(path).read_bytes()
    header, payload, start = _unpack(blob, DATASET_MAGIC)
    shape = tuple(header["shape"])
    if len(shape) != 3 or int(np.prod(shape)) * _F32.itemsize != len(payload):
        raise ShapeMismatchError(f"header shape {shape} does not match {len(payload)} payload bytes", start)
    images = np.frombuffer(payload, dtype=_F32).reshape(shape).astype(np.float32)
    n = shape[0]
    if header["kind"] == "radio_map":
        if len(header["labels"]) != n:
            raise ShapeMismatchError(f"{len(header['labels'])} labels for {n} images", start)
        data = RadioMap(images, np.array(header["labels"], dtype=np.int64), np.array(header["rp_coords"]),
                        header["scenario_id"], np.array(header["rp_ids"], dtype=np.int64))
    elif header["kind"] == "queries":
        pos = np.array(header["positions"], dtype=np.float64).reshape(-1, 2)
        if len(pos) != n:
            raise ShapeMismatchError(f"{len(pos)} positions for {n} images", start)
        data = QuerySet(images, pos, header["scenario_id"])
    else:
        raise PersistenceError(f"unknown dataset kind {header['kind']!r}")
    norm = header.get("norm")
    stats = None if norm is None else NormStats(norm["mean"], norm["std"])
    return DatasetFile(data, stats, header.get("seed"), header.get("scenario"), header.get("meta", {}))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    arch: str
    params: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    epoch: int | None = None
    extra: dict = field(default_factory=dict)


def write_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    manifest, chunks, offset = [], [], 0
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype=_F32)
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {"arch": ckpt.arch, "manifest": manifest, "config": ckpt.config, "epoch": ckpt.epoch, "extra": ckpt.extra}
    _atomic_write(path, _pack(CHECKPOINT_MAGIC, header, b"".join(chunks)))


def read_checkpoint(path: str | Path, expected_arch: str | None = None) -> Checkpoint:
    """Load and validate a checkpoint; nothing is returned unless every check passes."""
    blob = Path(path).read_bytes()
    header, payload, start = _unpack(blob, CHECKPOINT_MAGIC)
    if expected_arch is not None and header["arch"] != expected_arch:
        raise ArchitectureError(f"checkpoint is {header['arch']!r}, expected {expected_arch!r}", start)
    params, cursor = {}, 0
    for entry in sorted(header["manifest"], key=lambda e: e["offset"]):
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * _F32.itemsize
        if entry["offset"] != cursor or entry["nbytes"] != nbytes:
            raise ShapeMismatchError(f"manifest entry {entry['name']!r} does not tile the payload", start + cursor)
        params[entry["name"]] = np.frombuffer(payload, _F32, count=int(np.prod(shape)), offset=cursor).reshape(shape).astype(np.float32)
        cursor += nbytes
    if cursor != len(payload):
        raise ShapeMismatchError(f"manifest covers {cursor} of {len(payload)} payload bytes", start + cursor)
    return Checkpoint(header["arch"], params, header.get("config") or {}, header.get("epoch"), header.get("extra") or {})


def save_encoder(
    path, encoder: EncoderState, stats: NormStats, config: dict | None = None, epoch: int | None = None,
    momentum: EncoderState | None = None,
) -> None:
    params = dict(encoder.params)
    if momentum is not None:
        params.update({f"momentum/{k}": v for k, v in momentum.params.items()})
    extra = {"norm": {"mean": stats.mean, "std": stats.std}, "projection": encoder.projection}
    write_checkpoint(path, Checkpoint(encoder.arch, params, config or {}, epoch, extra))


def load_encoder(path, with_momentum: bool = False):
    """Return ``(encoder, stats, checkpoint)`` or, with ``with_momentum``, also the momentum encoder."""
    ck = read_checkpoint(path)
    if not ck.arch.startswith("cssloc-encoder/"):
        raise ArchitectureError(f"{ck.arch!r} is not an encoder checkpoint")
    projection = bool(ck.extra.get("projection", True))
    enc = EncoderState({k: v for k, v in ck.params.items() if "/" not in k}, projection)
    if enc.arch != ck.arch:
        raise ArchitectureError(f"parameters describe {enc.arch!r}, header says {ck.arch!r}")
    stats = NormStats(ck.extra["norm"]["mean"], ck.extra["norm"]["std"])
    if with_momentum:
        mom = EncoderState({k.split("/", 1)[1]: v for k, v in ck.params.items() if k.startswith("momentum/")}, projection, "momentum")
        return enc, mom, stats, ck
    return enc, stats, ck


def save_predictor(path, pred: PredictorState, config: dict | None = None, epoch: int | None = None) -> None:
    params = dict(pred.params)
    params["feature_mean"] = pred.feature_mean
    params["feature_std"] = pred.feature_std
    extra = {"rp_coords": pred.rp_coords.tolist(), "linear_probe": pred.linear_probe, "loss_history": pred.history}
    write_checkpoint(path, Checkpoint(pred.arch, params, config or {}, epoch, extra))


def load_predictor(path, expected_rps: int | None = None) -> PredictorState:
    ck = read_checkpoint(path)
    if not ck.arch.startswith("cssloc-predictor/"):
        raise ArchitectureError(f"{ck.arch!r} is not a predictor checkpoint")
    p = dict(ck.params)
    mean, std = p.pop("feature_mean"), p.pop("feature_std")
    pred = PredictorState(p, np.array(ck.extra["rp_coords"], dtype=np.float64), mean, std, bool(ck.extra["linear_probe"]),
                          list(ck.extra.get("loss_history", [])))
    if pred.arch != ck.arch:
        raise ArchitectureError(f"parameters describe {pred.arch!r}, header says {ck.arch!r}")
    if expected_rps is not None and pred.n_rps != expected_rps:
        raise ArchitectureError(f"predictor has {pred.n_rps} outputs, expected {expected_rps}")
    return pred
