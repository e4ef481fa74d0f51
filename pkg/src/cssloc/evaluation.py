"""Error statistics and the experiment protocols (accuracy, robustness, sweeps)."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .downstream import QuerySet, RadioMap, knn_batch, localize_batch, select_density, train_predictor
from .imaging import NormStats, PretrainCorpus
from .pretrain import DivergenceError, EncoderState, PretrainConfig, pretrain
from .sim import DYNAMICS, DynamicsProfile, Scenario, build_scenario, generate_dataset, generate_queries

logger = logging.getLogger(__name__)

DENSITIES = (0.2, 0.4, 0.6, 0.8, 1.0)
OPERATING_DENSITY = 0.6
SWEEP_EPOCHS = 30
LADDER = ("mild", "moderate", "severe")
# Unlabeled collections added to the pre-training corpus: (profile, period).
UNLABELED_COLLECTIONS = (("mild", 3), ("moderate", 4), ("severe", 5))


@dataclass
class ErrorReport:
    errors: np.ndarray
    rmse: float
    mae: float
    std: float
    median: float
    p80: float
    cdf: np.ndarray  # (n, 2): sorted error, cumulative fraction

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in ("rmse", "mae", "std", "median", "p80")} | {"n": int(len(self.errors))}


def compute_report(estimates: np.ndarray, ground_truth: np.ndarray) -> ErrorReport:
    """Euclidean error statistics; percentiles interpolate the empirical CDF linearly."""
    est = np.asarray(estimates, dtype=np.float64)
    truth = np.asarray(ground_truth, dtype=np.float64)
    if est.shape != truth.shape:
        raise ValueError(f"estimates {est.shape} and ground truth {truth.shape} differ in shape")
    if len(est) == 0:
        raise ValueError("no estimates to evaluate")
    if not (np.all(np.isfinite(est)) and np.all(np.isfinite(truth))):
        raise ValueError("non-finite coordinates")
    err = np.linalg.norm(est.reshape(len(est), -1) - truth.reshape(len(truth), -1), axis=1)
    srt = np.sort(err)
    frac = np.arange(1, len(srt) + 1) / len(srt)
    return ErrorReport(
        errors=err,
        rmse=float(np.sqrt(np.mean(err**2))),
        mae=float(err.mean()),
        std=float(err.std()),
        median=float(np.percentile(err, 50)),
        p80=float(np.percentile(err, 80)),
        cdf=np.column_stack([srt, frac]),
    )


@dataclass
class SweepResult:
    axis: str
    values: list
    rmse: list[float]
    collapsed: list[bool]
    per_seed: list[list[float]] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [
            {"axis": self.axis, "value": v, "rmse": r, "collapsed": c}
            for v, r, c in zip(self.values, self.rmse, self.collapsed)
        ]


# ---------------------------------------------------------------------------
# Desk-scale setup
# ---------------------------------------------------------------------------


@dataclass
class DeskSetup:
    """Everything one seed of an experiment needs.

    The pre-training corpus pools every scenario: the labeled survey (period 0)
    plus unlabeled collections taken in later periods under other dynamics.
    The downstream task uses the ``target`` scenario's survey map and queries
    at its (non-RP) test points in period 1.
    """

    seed: int
    scenarios: dict[str, Scenario]
    maps: dict[str, RadioMap]
    stats: NormStats
    corpus: PretrainCorpus
    target: str
    queries: QuerySet
    dynamics: DynamicsProfile | None

    @classmethod
    def build(
        cls,
        seed: int,
        images_per_rp: int = 10,
        samples_per_image: int = 10,
        dynamics: DynamicsProfile | None = DYNAMICS["baseline"],
        target: str = "corridor",
        presets: Sequence[str] = ("corridor", "hall", "lounge"),
        query_images: int = 4,
        unlabeled: Sequence[tuple[str, int]] = UNLABELED_COLLECTIONS,
        unlabeled_images_per_rp: int = 2,
    ) -> "DeskSetup":
        scenarios = {p: build_scenario(p, p, seed) for p in presets}
        maps = {p: generate_dataset(s, images_per_rp, samples_per_image, dynamics) for p, s in scenarios.items()}
        stats = NormStats.fit(np.concatenate([m.images for m in maps.values()]))
        extra = [
            generate_dataset(s, unlabeled_images_per_rp, samples_per_image, DYNAMICS[name], period=period)
            for name, period in unlabeled
            for s in scenarios.values()
        ]
        corpus = PretrainCorpus.from_maps([*maps.values(), *extra], stats)
        queries = generate_queries(scenarios[target], query_images, samples_per_image, dynamics, period=1)
        return cls(seed, scenarios, maps, stats, corpus, target, queries, dynamics)

    @property
    def radio_map(self) -> RadioMap:
        return self.maps[self.target]

    @property
    def scenario(self) -> Scenario:
        return self.scenarios[self.target]


def evaluate_predictor(encoder, predictor, queries: QuerySet, stats: NormStats) -> ErrorReport:
    est, _ = localize_batch(encoder, predictor, queries.images, stats)
    return compute_report(est, queries.positions)


def probe_rmse(
    encoder: EncoderState, setup: DeskSetup, linear_probe: bool = True, density: float = 1.0, seed: int | None = None, **kw
) -> float:
    """Train a predictor on the frozen encoder and return the RMSE on the setup's queries."""
    seed = setup.seed if seed is None else seed
    rmap = setup.radio_map
    if density < 1:
        rmap = select_density(rmap, density, np.random.default_rng([seed, 17]))
    pred = train_predictor(encoder, rmap, setup.stats, linear_probe=linear_probe, seed=seed, **kw)
    return evaluate_predictor(encoder, pred, setup.queries, setup.stats).rmse


def run_density_sweep(
    setup: DeskSetup,
    encoder: EncoderState,
    densities: Sequence[float] = DENSITIES,
    linear_probe: bool = False,
    **kw,
) -> SweepResult:
    """Predictor per density on a seeded RP subset, all scored on the same queries."""
    rmse = [probe_rmse(encoder, setup, linear_probe, d, **kw) for d in densities]
    return SweepResult(
        "density", list(densities), rmse, [False] * len(densities), [rmse],
        {"operating_point": OPERATING_DENSITY, "n_rps": setup.radio_map.n_rps},
    )


def drifted_queries(setup: DeskSetup, dyn: DynamicsProfile | None, period: int = 2, query_images: int = 4) -> QuerySet:
    return generate_queries(setup.scenario, query_images, 10, dyn, period=period)


def run_robustness(
    scenario: Scenario,
    dyn: DynamicsProfile | None,
    encoder: EncoderState,
    predictor,
    stats: NormStats,
    period: int = 2,
    query_images: int = 4,
    samples_per_image: int = 10,
) -> ErrorReport:
    """Score frozen encoder + predictor on queries collected under ``dyn`` in a later period."""
    queries = generate_queries(scenario, query_images, samples_per_image, dyn, period=period)
    return evaluate_predictor(encoder, predictor, queries, stats)


def run_knn_robustness(
    scenario: Scenario, dyn, radio_map: RadioMap, k: int = 3, period: int = 2, query_images: int = 4
) -> ErrorReport:
    queries = generate_queries(scenario, query_images, 10, dyn, period=period)
    est = np.array([e.coordinates for e in knn_batch(radio_map, queries.images, k)])
    return compute_report(est, queries.positions)


def pretrain_collapsed(setup: DeskSetup, cfg: PretrainConfig) -> tuple[EncoderState | None, bool, dict]:
    """Pre-train and report (encoder, collapsed flag, diagnostics); divergence counts as collapse."""
    try:
        res = pretrain(setup.corpus, cfg)
    except DivergenceError as exc:
        logger.warning("pre-training diverged: %s", exc)
        return None, True, {"diverged": str(exc)}
    return res.encoder, res.collapsed, {"final_loss": res.epoch_losses()[-1], "epochs": res.epochs_completed}


def _cfg_for(axis: str, value, base: PretrainConfig) -> PretrainConfig:
    if axis == "batch":
        return replace(base, batch_size=int(value), queue_size=max(base.queue_size, int(value)))
    if axis == "momentum":
        return replace(base, momentum=float(value))
    if axis == "temperature":
        return replace(base, temperature=float(value))
    if axis == "projection":
        return replace(base, projection=_as_bool(value))
    if axis == "images":
        return base
    raise ValueError(f"unknown sweep axis {axis!r}")


def _as_bool(v) -> bool:
    if isinstance(v, str):
        return v.lower() in ("1", "true", "on", "yes")
    return bool(v)


def run_param_sweeps(
    grid: dict[str, Sequence],
    seeds: Sequence[int] = (0,),
    base: PretrainConfig | None = None,
    epochs: int = SWEEP_EPOCHS,
    setups: dict[int, DeskSetup] | None = None,
    linear_probe: bool = True,
) -> list[SweepResult]:
    """Pre-train once per (axis value, seed) and record linear-probe RMSE and collapse.

    ``images`` regenerates the corpus with that many images per RP; the other
    axes vary one :class:`PretrainConfig` field.  RMSE of a diverged run is NaN.
    """
    base = base or PretrainConfig()
    setups = dict(setups or {})
    out = []
    for axis, values in grid.items():
        per_seed, flags = [], []
        for value in values:
            row, collapsed = [], False
            for seed in seeds:
                if axis == "images":
                    setup = DeskSetup.build(seed, images_per_rp=int(value))
                else:
                    setup = setups.get(seed) or setups.setdefault(seed, DeskSetup.build(seed))
                cfg = replace(_cfg_for(axis, value, base), seed=seed, epochs=epochs)
                enc, flag, _ = pretrain_collapsed(setup, cfg)
                collapsed |= flag
                row.append(float("nan") if enc is None else probe_rmse(enc, setup, linear_probe))
            per_seed.append(row)
            flags.append(collapsed)
        means = [float(np.nanmean(r)) if np.any(np.isfinite(r)) else float("nan") for r in per_seed]
        out.append(SweepResult(axis, list(values), means, flags, per_seed, {"epochs": epochs, "seeds": list(seeds)}))
    return out


def cluster_quality(encoder: EncoderState, radio_map: RadioMap, stats: NormStats) -> float:
    """Silhouette score of the encoder's embeddings with RP labels as clusters."""
    from sklearn.metrics import silhouette_score

    if radio_map.n_rps < 2 or len(np.unique(radio_map.labels)) < 2:
        raise ValueError("silhouette needs at least two clusters")
    emb = encoder.embed(stats.apply(radio_map.images)).astype(np.float64)
    return float(silhouette_score(emb, radio_map.labels))


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def write_cdf_csv(report: ErrorReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["error_m", "cumulative_fraction"])
        w.writerows((repr(float(e)), repr(float(f))) for e, f in report.cdf)


def write_cdf_svg(reports: dict[str, ErrorReport], path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, rep in reports.items():
        ax.step(rep.cdf[:, 0], rep.cdf[:, 1], where="post", label=name)
    ax.set_xlabel("localization error (m)")
    ax.set_ylabel("CDF")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def write_sweeps_csv(results: Iterable[SweepResult], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["axis", "value", "rmse", "collapsed"])
        w.writeheader()
        for r in results:
            w.writerows(r.rows())


def write_summary(path: str | Path, **payload) -> None:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if hasattr(o, "__dataclass_fields__"):
            return asdict(o)
        raise TypeError(type(o))

    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=default, allow_nan=True)
