"""Synthetic CSI for desk-scale indoor scenarios.

The channel between a fixed access point and a receiver at position ``p`` is a
sum of rays.  Ray 0 is the direct path from the transmitter; every other ray
comes from a static virtual source (an image of the transmitter off a wall or
scatterer) seeded per scenario::

    h[antenna, sub] = sum over rays of gain * exp(j * (phase[antenna] - 2 pi * offset[sub] * delay))

The gain is a per-ray reflection coefficient times distance ** (-exponent / 2)
(log-distance amplitude), the delay is distance / c, and the per-antenna phase
is the ray's static phase minus pi * antenna * cos(arrival angle) for a
half-wavelength receive array.  Offsets are baseband subcarrier frequencies
across the 40 MHz channel; the carrier phase of each ray is folded into its
static phase so fingerprints vary smoothly over metre-scale moves.

Temporal dynamics (gain drift, additive noise, transient scatterers) are drawn
from a generator keyed on ``(seed, point, t)`` so every sample is reproducible
without shared state.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .imaging import CsiImage, make_image

SPEED_OF_LIGHT = 299_792_458.0
CENTER_FREQ_HZ = 5.32e9
BANDWIDTH_HZ = 40e6
MAX_EXCESS_DELAY_S = 200e-9
MIN_DISTANCE_M = 1.0

# generator stream tags
_RP_STREAM = 0
_TEST_STREAM = 1
_GEOMETRY_STREAM = 7


class ConfigurationError(ValueError):
    pass


def subcarrier_offsets(n_subcarriers: int) -> np.ndarray:
    """Baseband offsets (Hz) of evenly spaced subcarriers across the channel."""
    spacing = BANDWIDTH_HZ / n_subcarriers
    return (np.arange(n_subcarriers) + 0.5) * spacing - BANDWIDTH_HZ / 2


def subcarrier_frequencies(n_subcarriers: int) -> np.ndarray:
    return CENTER_FREQ_HZ + subcarrier_offsets(n_subcarriers)


@dataclass
class DynamicsProfile:
    """Temporal perturbation of the static channel.

    ``gain_drift_std`` is the std of the log of a per-ray multiplicative gain,
    ``noise_std`` the std of circular complex Gaussian noise added to ``h`` and
    ``extra_path_prob`` the chance that a transient scatterer ray is present.
    """

    gain_drift_std: float = 0.0
    noise_std: float = 0.0
    extra_path_prob: float = 0.0

    def __post_init__(self):
        for k in ("gain_drift_std", "noise_std", "extra_path_prob"):
            if getattr(self, k) < 0:
                raise ConfigurationError(f"{k} must be >= 0")
        if self.extra_path_prob > 1:
            raise ConfigurationError("extra_path_prob must be <= 1")

    @property
    def is_null(self) -> bool:
        return self.gain_drift_std == 0 and self.noise_std == 0 and self.extra_path_prob == 0


# Named profiles used by the CLI and experiments.  "baseline" is the
# collection condition for training maps and clean test sets.
DYNAMICS = {
    "none": None,
    "baseline": DynamicsProfile(gain_drift_std=0.25, noise_std=0.01, extra_path_prob=0.3),
    "mild": DynamicsProfile(gain_drift_std=0.30, noise_std=0.02, extra_path_prob=0.4),
    "moderate": DynamicsProfile(gain_drift_std=0.35, noise_std=0.04, extra_path_prob=0.5),
    "severe": DynamicsProfile(gain_drift_std=0.40, noise_std=0.08, extra_path_prob=0.6),
}


@dataclass(eq=False)
class Scenario:
    name: str
    extent: tuple[float, float]
    rp_grid: np.ndarray
    tx_positions: np.ndarray
    test_points: np.ndarray
    n_antennas: int = 3
    n_subcarriers: int = 30
    path_count: int = 6
    path_loss_exponent: float = 2.0
    los_gain: float = 1.0
    seed: int = 0
    grid_spacing: float = 1.0
    sources: np.ndarray = field(default=None, repr=False)
    reflection: np.ndarray = field(default=None, repr=False)
    ray_phase: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.rp_grid = np.asarray(self.rp_grid, dtype=np.float64).reshape(-1, 2)
        self.tx_positions = np.asarray(self.tx_positions, dtype=np.float64).reshape(-1, 2)
        self.test_points = np.asarray(self.test_points, dtype=np.float64).reshape(-1, 2)
        if len(self.rp_grid) == 0:
            raise ConfigurationError(f"scenario {self.name!r} has no reference points")
        if len(self.tx_positions) == 0:
            raise ConfigurationError(f"scenario {self.name!r} has no transmitter")
        if self.n_antennas < 1 or self.n_subcarriers < 1 or self.path_count < 1:
            raise ConfigurationError("n_antennas, n_subcarriers and path_count must be >= 1")
        w, d = self.extent
        for pts, what in ((self.rp_grid, "RP"), (self.test_points, "test point")):
            if len(pts) and not np.all((pts >= 0) & (pts <= (w, d))):
                raise ConfigurationError(f"{what} outside the {w} x {d} m extent")
        if len(np.unique(self.rp_grid, axis=0)) != len(self.rp_grid):
            raise ConfigurationError("duplicate RP coordinates")
        if self.sources is None:
            self._draw_geometry()

    def _draw_geometry(self) -> None:
        rng = np.random.default_rng([self.seed, _GEOMETRY_STREAM])
        n_rays = self.path_count - 1
        center = np.asarray(self.extent) / 2
        half_diag = float(np.hypot(*self.extent)) / 2
        radius = rng.uniform(half_diag, MAX_EXCESS_DELAY_S * SPEED_OF_LIGHT, n_rays)
        angle = rng.uniform(0, 2 * np.pi, n_rays)
        virtual = center + radius[:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=1)
        self.sources = np.vstack([self.tx_positions[:1], virtual])
        self.reflection = np.concatenate([[self.los_gain], rng.uniform(0.3, 0.8, n_rays)])
        self.ray_phase = np.concatenate([[0.0], rng.uniform(0, 2 * np.pi, n_rays)])

    @property
    def n_rps(self) -> int:
        return len(self.rp_grid)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "extent": list(self.extent),
            "rp_grid": self.rp_grid.tolist(),
            "tx_positions": self.tx_positions.tolist(),
            "test_points": self.test_points.tolist(),
            "n_antennas": self.n_antennas,
            "n_subcarriers": self.n_subcarriers,
            "path_count": self.path_count,
            "path_loss_exponent": self.path_loss_exponent,
            "los_gain": self.los_gain,
            "seed": self.seed,
            "grid_spacing": self.grid_spacing,
            "sources": self.sources.tolist(),
            "reflection": self.reflection.tolist(),
            "ray_phase": self.ray_phase.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Scenario":
        d = dict(d)
        d["extent"] = tuple(d["extent"])
        for k in ("sources", "reflection", "ray_phase"):
            if d.get(k) is not None:
                d[k] = np.asarray(d[k], dtype=np.float64)
        return cls(**d)


@dataclass
class CsiSample:
    rp_index: int
    timestamp: int
    h: np.ndarray

    @property
    def amplitude(self) -> np.ndarray:
        return np.abs(self.h)


# Desk-scale presets: RP counts are roughly a tenth of the surveyed sites.
PRESETS: dict[str, dict[str, Any]] = {
    "corridor": dict(
        extent=(36.0, 3.0), origin=(0.5, 1.5), counts=(36, 1), tx=(6.0, 2.8),
        path_count=6, path_loss_exponent=2.0, los_gain=1.0,
    ),
    "hall": dict(
        extent=(5.0, 4.0), origin=(0.5, 0.5), counts=(5, 4), tx=(2.5, 3.9),
        path_count=4, path_loss_exponent=2.0, los_gain=1.0,
    ),
    "lounge": dict(
        extent=(7.0, 6.0), origin=(0.5, 0.5), counts=(7, 6), tx=(0.2, 5.8),
        path_count=8, path_loss_exponent=3.5, los_gain=0.4,
    ),
}


def lattice(origin, counts, spacing, extent) -> np.ndarray:
    """Uniform lattice ``origin + (i, j) * spacing`` clipped to the extent."""
    nx, ny = counts
    xs = origin[0] + spacing * np.arange(nx)
    ys = origin[1] + spacing * np.arange(ny)
    pts = np.array([(x, y) for y in ys for x in xs], dtype=np.float64).reshape(-1, 2)
    inside = (pts[:, 0] >= 0) & (pts[:, 0] <= extent[0]) & (pts[:, 1] >= 0) & (pts[:, 1] <= extent[1])
    return pts[inside]


def _midpoints(origin, counts, spacing, extent) -> np.ndarray:
    nx, ny = counts
    if nx < 2:
        return np.zeros((0, 2))
    shift_y = 0.5 * spacing if ny > 1 else 0.0
    return lattice(
        (origin[0] + 0.5 * spacing, origin[1] + shift_y), (nx - 1, max(ny - 1, 1)), spacing, extent
    )


def load_scenario_config(path: str | Path) -> dict[str, dict[str, Any]]:
    """Read preset overrides: a JSON object mapping preset name to fields."""
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ConfigurationError("scenario config must be a JSON object")
    return cfg


def build_scenario(
    name: str,
    preset: str = "custom",
    seed: int = 0,
    overrides: dict[str, Any] | None = None,
    spacing: float = 1.0,
) -> Scenario:
    """Build a scenario from a named preset, optionally overriding its fields.

    ``custom`` requires ``rp_grid`` and ``tx_positions`` in ``overrides``.
    Preset fields ``origin``, ``counts`` and ``extent`` define the lattice;
    ``max_rps`` truncates the RP list (row-major) for quick runs.
    """
    overrides = dict(overrides or {})
    if preset == "custom":
        if not overrides.get("rp_grid"):
            raise ConfigurationError("custom scenario needs a non-empty rp_grid")
        if not overrides.get("tx_positions"):
            raise ConfigurationError("custom scenario needs tx_positions")
        max_rps = overrides.pop("max_rps", None)
        overrides.setdefault("test_points", [])
        if "extent" not in overrides:
            pts = np.vstack([np.reshape(overrides[k], (-1, 2)) for k in ("rp_grid", "tx_positions", "test_points") if len(overrides[k])])
            overrides["extent"] = tuple(float(v) + 1.0 for v in pts.max(axis=0))
        s = Scenario(name=name, seed=seed, **overrides)
        return _truncate(s, max_rps)
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)} or custom")
    p = {**PRESETS[preset], **overrides}
    max_rps = p.pop("max_rps", None)
    extent = tuple(float(v) for v in p.pop("extent"))
    origin, counts, tx = p.pop("origin"), p.pop("counts"), p.pop("tx")
    spacing = float(p.pop("grid_spacing", spacing))
    rp_grid = p.pop("rp_grid", None)
    if rp_grid is None:
        rp_grid = lattice(origin, counts, spacing, extent)
    test_points = p.pop("test_points", None)
    if test_points is None:
        test_points = _midpoints(origin, counts, spacing, extent)
    s = Scenario(
        name=name, extent=extent, rp_grid=rp_grid, tx_positions=p.pop("tx_positions", [tx]),
        test_points=test_points, seed=seed, grid_spacing=spacing, **p,
    )
    return _truncate(s, max_rps)


def _truncate(s: Scenario, max_rps: int | None) -> Scenario:
    if max_rps is None or max_rps >= s.n_rps:
        return s
    if max_rps < 1:
        raise ConfigurationError("max_rps must be >= 1")
    s.rp_grid = s.rp_grid[:max_rps]
    hi = s.rp_grid.max(axis=0) + 1e-9
    lo = s.rp_grid.min(axis=0) - 1e-9
    keep = np.all((s.test_points >= lo) & (s.test_points <= hi), axis=1)
    s.test_points = s.test_points[keep]
    return s


def channel_at(
    s: Scenario,
    position: np.ndarray,
    dyn: DynamicsProfile | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Complex response ``h`` of shape (n_antennas, n_subcarriers) at ``position``."""
    position = np.asarray(position, dtype=np.float64)
    delta = position - s.sources
    dist = np.maximum(np.hypot(delta[:, 0], delta[:, 1]), MIN_DISTANCE_M)
    gain = s.reflection * dist ** (-s.path_loss_exponent / 2)
    delay = dist / SPEED_OF_LIGHT
    cos_aoa = delta[:, 0] / dist
    phase = s.ray_phase.copy()

    if dyn is not None and not dyn.is_null:
        if dyn.gain_drift_std > 0:
            gain = gain * np.exp(rng.normal(0.0, dyn.gain_drift_std, len(gain)))
        if dyn.extra_path_prob > 0 and rng.random() < dyn.extra_path_prob:
            extra_delay = delay.min() + rng.uniform(0, MAX_EXCESS_DELAY_S)
            extra_gain = gain[0] * rng.uniform(0.2, 0.6)
            gain = np.append(gain, extra_gain)
            delay = np.append(delay, extra_delay)
            cos_aoa = np.append(cos_aoa, rng.uniform(-1, 1))
            phase = np.append(phase, rng.uniform(0, 2 * np.pi))

    f = subcarrier_offsets(s.n_subcarriers)
    a = np.arange(s.n_antennas)
    ant_phase = phase[None, :] - np.pi * a[:, None] * cos_aoa[None, :]  # (A, L)
    ray = gain[None, :, None] * np.exp(1j * (ant_phase[:, :, None] - 2 * np.pi * delay[None, :, None] * f[None, None, :]))
    h = ray.sum(axis=1)

    if dyn is not None and dyn.noise_std > 0:
        noise = rng.normal(size=h.shape) + 1j * rng.normal(size=h.shape)
        h = h + dyn.noise_std / math.sqrt(2) * noise
    return h


def _sample_rng(s: Scenario, stream: int, index: int, t: int, period: int) -> np.random.Generator:
    return np.random.default_rng([s.seed, stream, index, t, period])


def sample_csi(
    s: Scenario, rp: int, t: int, dyn: DynamicsProfile | None = None, period: int = 0
) -> CsiSample:
    """CSI at reference point ``rp`` for sample index ``t``.

    ``period`` selects an independent collection campaign: the same ``t`` in a
    different period draws fresh dynamics.
    """
    if not 0 <= rp < s.n_rps:
        raise IndexError(f"RP {rp} out of range for {s.n_rps} RPs")
    rng = _sample_rng(s, _RP_STREAM, rp, t, period) if dyn is not None else None
    return CsiSample(rp, t, channel_at(s, s.rp_grid[rp], dyn, rng))


def sample_csi_at_test_point(
    s: Scenario, point: int, t: int, dyn: DynamicsProfile | None = None, period: int = 0
) -> CsiSample:
    if not 0 <= point < len(s.test_points):
        raise IndexError(f"test point {point} out of range for {len(s.test_points)} points")
    rng = _sample_rng(s, _TEST_STREAM, point, t, period) if dyn is not None else None
    return CsiSample(-1, t, channel_at(s, s.test_points[point], dyn, rng))


def _images_at(sampler, s: Scenario, index: int, images: int, per_image: int, dyn, period: int, label: int):
    out = []
    for i in range(images):
        samples = [sampler(s, index, i * per_image + j, dyn, period) for j in range(per_image)]
        for smp in samples:
            smp.rp_index = label
        out.append(make_image(samples, scenario_id=s.name))
    return out


def generate_dataset(
    s: Scenario,
    images_per_rp: int,
    samples_per_image: int = 10,
    dyn: DynamicsProfile | None = None,
    period: int = 0,
):
    """Radio map with ``images_per_rp`` CSI images for every RP of ``s``."""
    from .downstream import RadioMap

    if samples_per_image < 1 or images_per_rp < 1:
        raise ConfigurationError("images_per_rp and samples_per_image must be >= 1")
    images: list[CsiImage] = []
    for rp in range(s.n_rps):
        images += _images_at(sample_csi, s, rp, images_per_rp, samples_per_image, dyn, period, rp)
    return RadioMap.from_images(images, s.rp_grid, scenario_id=s.name)


def generate_queries(
    s: Scenario,
    images_per_point: int,
    samples_per_image: int = 10,
    dyn: DynamicsProfile | None = None,
    period: int = 1,
):
    """Held-out query images at the scenario's test points (not at RPs)."""
    from .downstream import QuerySet

    if len(s.test_points) == 0:
        raise ConfigurationError(f"scenario {s.name!r} has no test points")
    pixels, positions = [], []
    for p in range(len(s.test_points)):
        for img in _images_at(sample_csi_at_test_point, s, p, images_per_point, samples_per_image, dyn, period, -1):
            pixels.append(img.pixels)
            positions.append(s.test_points[p])
    return QuerySet(np.stack(pixels).astype(np.float32), np.asarray(positions), scenario_id=s.name)
