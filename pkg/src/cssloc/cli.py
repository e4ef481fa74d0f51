"""Command line entry point: simulate -> pretrain -> probe -> localize -> evaluate, plus sweeps.

Every subcommand writes its outputs and a ``manifest.json`` under ``--out``.
Exit codes: 0 success, 2 bad usage, 3 invalid configuration or grid,
4 file-format rejection, 5 missing input file, 6 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_FORMAT = 4
EXIT_MISSING = 5
EXIT_DIVERGED = 6

logger = logging.getLogger("cssloc")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _default_seed() -> int:
    raw = os.environ.get("CSSLOC_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"CSSLOC_SEED={raw!r} is not an integer", EXIT_CONFIG) from None


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"input file not found: {path}", EXIT_MISSING)
    return p


def _parse_grid(text: str, cast=float) -> list:
    try:
        values = [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"invalid grid {text!r}", EXIT_CONFIG) from None
    if not values:
        raise CliError("empty grid", EXIT_CONFIG)
    return values


def _parse_seeds(text: str) -> list[int]:
    if "," not in text and text.strip().isdigit():
        return list(range(int(text)))
    return _parse_grid(text, int)


def _dynamics(value: str | None):
    from .sim import DYNAMICS, DynamicsProfile

    if value is None or value in DYNAMICS:
        return DYNAMICS[value or "baseline"]
    path = Path(value)
    if not path.is_file():
        raise CliError(f"unknown dynamics {value!r}: use {sorted(DYNAMICS)} or a JSON file", EXIT_CONFIG)
    return DynamicsProfile(**json.loads(path.read_text()))


def _manifest(args, out: Path, config: dict, outputs: list[Path], started: float) -> None:
    manifest = {
        "subcommand": args.command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "git_describe": _git_describe(),
        "started_at": datetime.now(timezone.utc).isoformat(),
        "wall_time_s": time.time() - started,
        "outputs": sorted(str(p.relative_to(out)) for p in outputs),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _resolved(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "command")}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args, out: Path) -> tuple[dict, list[Path]]:
    from .imaging import NormStats
    from .persistence import write_dataset
    from .sim import PRESETS, build_scenario, generate_dataset, generate_queries, load_scenario_config

    overrides = load_scenario_config(args.config) if args.config else {}
    presets = sorted(PRESETS) if args.preset == "all" else [args.preset]
    dyn = _dynamics(args.dynamics)
    outputs = []
    for preset in presets:
        ov = dict(overrides.get(preset, {}))
        if args.rps is not None:
            ov["max_rps"] = args.rps
        s = build_scenario(preset, preset, args.seed, ov)
        rmap = generate_dataset(s, args.images_per_rp, args.samples_per_image, dyn, period=args.period)
        stats = NormStats.fit(rmap.images)
        meta = {"dynamics": None if dyn is None else asdict(dyn), "period": args.period}
        path = out / f"{preset}.cssd"
        write_dataset(path, rmap, stats, args.seed, s.to_dict(), meta)
        outputs.append(path)
        if args.query_images > 0 and len(s.test_points):
            qs = generate_queries(s, args.query_images, args.samples_per_image, dyn, period=args.period + 1)
            qpath = out / f"{preset}_queries.cssd"
            write_dataset(qpath, qs, stats, args.seed, s.to_dict(), {**meta, "period": args.period + 1})
            outputs.append(qpath)
        logger.info("%s: %d RPs, %d images", preset, s.n_rps, len(rmap))
    return _resolved(args), outputs


def cmd_pretrain(args, out: Path) -> tuple[dict, list[Path]]:
    from .imaging import NormStats, PretrainCorpus
    from .persistence import read_dataset, save_encoder
    from .pretrain import PretrainConfig, pretrain

    maps = []
    for path in args.data:
        df = read_dataset(_existing(path))
        if not hasattr(df.data, "labels"):
            raise CliError(f"{path} holds queries, not a radio map", EXIT_CONFIG)
        maps.append(df.data)
    stats = NormStats.fit(np.concatenate([m.images for m in maps]))
    cfg = PretrainConfig(
        batch_size=args.batch, epochs=args.epochs, temperature=args.tau, momentum=args.momentum,
        queue_size=args.queue, lr=args.lr, weight_decay=args.weight_decay, seed=args.seed,
        projection=not args.no_projection,
    )
    print(json.dumps({"pretrain_config": cfg.to_dict()}, sort_keys=True))
    corpus = PretrainCorpus.from_maps(maps, stats)
    log_path = out / "train_log.csv"
    res = pretrain(corpus, cfg, log_path=log_path)
    enc_path = out / "encoder.cssc"
    save_encoder(enc_path, res.encoder, stats, cfg.to_dict(), res.epochs_completed, momentum=res.momentum_encoder)
    config = {**_resolved(args), "pretrain_config": cfg.to_dict(), "collapsed": res.collapsed,
              "norm": {"mean": stats.mean, "std": stats.std}, "n_images": len(corpus),
              "batch_deviation": "desk-scale batch 256 instead of 1024" if cfg.batch_size != 1024 else None}
    return config, [enc_path, log_path]


def cmd_probe(args, out: Path) -> tuple[dict, list[Path]]:
    from .downstream import select_density, train_predictor
    from .persistence import load_encoder, read_dataset, save_predictor

    enc, stats, _ = load_encoder(_existing(args.encoder))
    df = read_dataset(_existing(args.data))
    rmap = df.data
    if not hasattr(rmap, "labels"):
        raise CliError(f"{args.data} holds queries, not a radio map", EXIT_CONFIG)
    if not 0 < args.density <= 1:
        raise CliError("--density must lie in (0, 1]", EXIT_CONFIG)
    if args.density < 1:
        rmap = select_density(rmap, args.density, np.random.default_rng([args.seed, 17]))
    pred = train_predictor(enc.encoder_only(), rmap, stats, epochs=args.epochs, lr=args.lr,
                           linear_probe=args.linear_probe, seed=args.seed)
    path = out / "predictor.cssc"
    save_predictor(path, pred, {"density": args.density, "epochs": args.epochs, "lr": args.lr}, args.epochs)
    config = {**_resolved(args), "rps_used": rmap.rp_ids.tolist(), "n_rps_total": df.data.n_rps,
              "final_loss": pred.history[-1]}
    return config, [path]


def cmd_localize(args, out: Path) -> tuple[dict, list[Path]]:
    from .downstream import knn_batch, localize_batch
    from .persistence import load_encoder, load_predictor, read_dataset

    enc, stats, _ = load_encoder(_existing(args.encoder))
    pred = load_predictor(_existing(args.predictor))
    qs = read_dataset(_existing(args.queries)).data
    coords, post = localize_batch(enc.encoder_only(), pred, qs.images, stats)
    outputs = [_write_estimates(out / "estimates.csv", coords, post.argmax(axis=1), qs.positions)]
    if args.knn_map:
        rmap = read_dataset(_existing(args.knn_map)).data
        est = knn_batch(rmap, qs.images, args.k)
        kc = np.array([e.coordinates for e in est])
        outputs.append(_write_estimates(out / "knn_estimates.csv", kc, [e.top_label for e in est], qs.positions))
    return _resolved(args), outputs


def _write_estimates(path: Path, coords, top, truth) -> Path:
    err = np.linalg.norm(np.asarray(coords) - np.asarray(truth), axis=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "x_hat", "y_hat", "error_m", "top_label"])
        for i, ((x, y), e, t) in enumerate(zip(coords, err, top)):
            w.writerow([i, repr(float(x)), repr(float(y)), repr(float(e)), int(t)])
    return path


def _read_xy(path: Path, xcol: str, ycol: str) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return np.array([[float(r[xcol]), float(r[ycol])] for r in rows])
    except KeyError as exc:
        raise CliError(f"{path} lacks column {exc}", EXIT_FORMAT) from None


def cmd_evaluate(args, out: Path) -> tuple[dict, list[Path]]:
    from .evaluation import compute_report, write_cdf_csv, write_cdf_svg, write_summary
    from .persistence import read_dataset

    est = _read_xy(_existing(args.estimates), "x_hat", "y_hat")
    truth_path = _existing(args.truth)
    if truth_path.suffix == ".csv":
        truth = _read_xy(truth_path, "x", "y")
    else:
        truth = read_dataset(truth_path).data.positions
    if len(truth) != len(est):
        raise CliError(f"{len(est)} estimates for {len(truth)} ground-truth points", EXIT_CONFIG)
    rep = compute_report(est, truth)
    paths = [out / "report.json", out / "cdf.csv", out / "cdf.svg"]
    write_summary(paths[0], metrics=rep.summary(), estimates=str(args.estimates), truth=str(args.truth))
    write_cdf_csv(rep, paths[1])
    write_cdf_svg({Path(args.estimates).stem: rep}, paths[2])
    print(json.dumps(rep.summary(), sort_keys=True))
    return _resolved(args), paths


def cmd_sweep(args, out: Path) -> tuple[dict, list[Path]]:
    from .evaluation import DeskSetup, run_density_sweep, run_param_sweeps, write_summary, write_sweeps_csv
    from .persistence import load_encoder
    from .pretrain import PretrainConfig, pretrain

    cast = {"batch": int, "images": int, "projection": str}.get(args.axis, float)
    grid = _parse_grid(args.grid, cast)
    seeds = _parse_seeds(args.seeds)
    base = PretrainConfig(seed=seeds[0])
    if args.axis == "density":
        if any(not 0 < v <= 1 for v in grid):
            raise CliError("density grid values must lie in (0, 1]", EXIT_CONFIG)
        per_seed = []
        for seed in seeds:
            setup = DeskSetup.build(seed)
            if args.encoder:
                enc, _, _ = load_encoder(_existing(args.encoder))
            else:
                enc = pretrain(setup.corpus, replace(base, seed=seed, epochs=args.pretrain_epochs)).encoder
            per_seed.append(run_density_sweep(setup, enc.encoder_only(), grid).rmse)
        arr = np.array(per_seed)
        from .evaluation import OPERATING_DENSITY, SweepResult

        results = [SweepResult("density", grid, arr.mean(axis=0).tolist(), [False] * len(grid), arr.T.tolist(),
                               {"seeds": seeds, "operating_point": OPERATING_DENSITY})]
        csv_path = out / "density.csv"
    else:
        try:
            results = run_param_sweeps({args.axis: grid}, seeds, base, epochs=args.epochs)
        except ValueError as exc:
            raise CliError(str(exc), EXIT_CONFIG) from exc
        csv_path = out / "sweeps.csv"
    write_sweeps_csv(results, csv_path)
    summary = out / "summary.json"
    write_summary(summary, axis=args.axis, grid=grid, seeds=seeds, results=[asdict(r) for r in results],
                  sweep_epochs=args.epochs)
    return _resolved(args), [csv_path, summary]


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .evaluation import SWEEP_EPOCHS
    from .pretrain import PretrainConfig
    from .sim import DYNAMICS, PRESETS

    d = PretrainConfig()
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="cssloc", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--out", required=True, help="output directory")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="RNG seed (falls back to $CSSLOC_SEED, then 0)")

    p = sub.add_parser("simulate", help="generate synthetic radio maps and query sets", formatter_class=fmt)
    p.add_argument("--preset", choices=[*sorted(PRESETS), "custom", "all"], default="all")
    p.add_argument("--config", help="JSON file with per-preset scenario overrides")
    p.add_argument("--rps", type=int, default=None, help="keep only the first N RPs")
    p.add_argument("--images-per-rp", type=int, default=10)
    p.add_argument("--samples-per-image", type=int, default=10)
    p.add_argument("--query-images", type=int, default=4, help="query images per test point (0 disables)")
    p.add_argument("--dynamics", default="baseline", help=f"one of {sorted(DYNAMICS)} or a JSON profile")
    p.add_argument("--period", type=int, default=0, help="collection period index")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pretrain", help="contrastive pre-training of the encoder", formatter_class=fmt)
    p.add_argument("--data", nargs="+", required=True, help="radio map files pooled into the corpus")
    p.add_argument("--batch", type=int, default=d.batch_size)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--tau", type=float, default=d.temperature)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--queue", type=int, default=d.queue_size)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--no-projection", action="store_true", help="contrast raw features (ablation)")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="train the location predictor on a frozen encoder", formatter_class=fmt)
    p.add_argument("--encoder", required=True)
    p.add_argument("--data", required=True, help="radio map of the target scenario")
    p.add_argument("--density", type=float, default=1.0, help="fraction of RPs used for training")
    p.add_argument("--epochs", type=int, default=50, help="predictor training epochs")
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--linear-probe", action="store_true", help="single softmax layer instead of fc 100-32")
    common(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("localize", help="estimate locations for a query set", formatter_class=fmt)
    p.add_argument("--encoder", required=True)
    p.add_argument("--predictor", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--knn-map", help="also write kNN baseline estimates against this radio map")
    p.add_argument("--k", type=int, default=3)
    common(p, seed=False)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("evaluate", help="error statistics and CDF for estimates", formatter_class=fmt)
    p.add_argument("--estimates", required=True, help="estimates CSV from localize")
    p.add_argument("--truth", required=True, help="query dataset file or CSV with x,y columns")
    common(p, seed=False)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="density or pre-training parameter sweep", formatter_class=fmt)
    p.add_argument("--axis", required=True, choices=["density", "images", "batch", "momentum", "temperature", "projection"])
    p.add_argument("--grid", required=True, help="comma separated values")
    p.add_argument("--seeds", default="1", help="seed count N (0..N-1) or comma separated seeds")
    p.add_argument("--epochs", type=int, default=SWEEP_EPOCHS, help="pre-training epochs per grid point")
    p.add_argument("--pretrain-epochs", type=int, default=d.epochs, help="density axis: encoder epochs")
    p.add_argument("--encoder", help="density axis: reuse this encoder instead of pre-training")
    common(p, seed=False)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    from .persistence import PersistenceError
    from .pretrain import DivergenceError
    from .sim import ConfigurationError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        if hasattr(args, "seed") and args.seed is None:
            args.seed = _default_seed()
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.threads:
            from threadpoolctl import threadpool_limits

            threadpool_limits(args.threads)
        config, outputs = args.func(args, out)
        _manifest(args, out, config, outputs, started)
    except CliError as exc:
        print(f"cssloc {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except PersistenceError as exc:
        print(f"cssloc {args.command}: file rejected: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except DivergenceError as exc:
        print(f"cssloc {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigurationError, ValueError) as exc:
        print(f"cssloc {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
