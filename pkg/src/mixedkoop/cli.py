"""``mixedkoop`` command line: gen-data, train, eval, simulate, sweep, inspect.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .core import CollisionError
from .dataio import (DataError, DatasetSplit, Samples, extract_cf_pairs, load_trajectories, make_samples,
                     manifest_hash, split_and_normalize, synthetic_corpus)

log = logging.getLogger("mixedkoop")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class NumericalFailure(RuntimeError):
    pass


def _numeric_errors() -> tuple:
    from .adapkoopnet import TrainingDivergedError
    from .edmd import RankDeficiencyError
    from .mpc import QpError
    return TrainingDivergedError, RankDeficiencyError, QpError, np.linalg.LinAlgError, NumericalFailure, CollisionError


# --------------------------------------------------------------------------- commands


def build_dataset(cfg: RunConfig) -> DatasetSplit:
    mc = cfg.model.model_config_for(cfg.seed)
    d = cfg.data
    if d.source == "csv":
        if d.csv_path is None:
            raise ConfigError("data.csv_path is required when data.source is 'csv'")
        series = load_trajectories(d.csv_path, d.schema_map or None)
        episodes = extract_cf_pairs(series, min_duration=d.min_duration)
        parts = [make_samples(ep, stride=d.stride, context=mc.context, horizon=mc.horizon) for ep in episodes]
        parts = [p for p in parts if len(p)]
        if not parts:
            raise DataError(f"{d.csv_path}: no car-following episode is long enough for one window")
        samples = Samples.concat(parts)
    else:
        samples = synthetic_corpus(d.n_runs, d.n_vehicles, cfg.seed, duration=d.duration,
                                   truck_fraction=d.truck_fraction, context=mc.context, horizon=mc.horizon,
                                   stride=d.stride)
    return split_and_normalize(samples, cfg.seed)


def cmd_gen_data(cfg: RunConfig) -> int:
    split = build_dataset(cfg)
    out = split.save(cfg.dataset_dir)
    sizes = split.sizes()
    print(f"samples: train={sizes['train']} val={sizes['val']} test={sizes['test']}")
    print(f"dataset: {out}  manifest sha256 {manifest_hash(out)[:16]}")
    return EXIT_OK


def _load_or_build_dataset(cfg: RunConfig) -> DatasetSplit:
    if (cfg.dataset_dir / "split.json").exists():
        return DatasetSplit.load(cfg.dataset_dir)
    split = build_dataset(cfg)
    split.save(cfg.dataset_dir)
    return split


def cmd_train(cfg: RunConfig, resume: bool = False) -> int:
    from .evaluation import horizon_table, koopman_predictions

    split = _load_or_build_dataset(cfg)
    ckpt = cfg.checkpoint
    if cfg.model.variant == "edmd":
        from .edmd import fit_vehicle_edmd, save_edmd
        model = fit_vehicle_edmd(split, cfg.model.edmd_centers, cfg.seed)
        save_edmd(model, ckpt)
        history = [{"residual": model.meta["residual"]}]
    else:
        from .adapkoopnet import load_predictor, train
        mc = cfg.model.model_config_for(cfg.seed)
        prior = None
        if resume:
            if not ckpt.exists():
                raise DataError(f"cannot resume: checkpoint not found: {ckpt}")
            prior = load_predictor(ckpt)
            print(f"resuming from epoch {prior.epoch}")
        epochs = None if prior is None else (cfg.model.epochs or mc.max_epochs)
        predictor, history = train(split, mc, resume=prior, epochs=epochs)
        predictor.save(ckpt)
        model = predictor.export_koopman_blocks()
        print(f"trained epochs: {predictor.epoch}")
    table = horizon_table(koopman_predictions(model, split.val), split.val.targets)
    v_avg = float(table.loc[table.horizon_s == "average", "v_rmse"].iloc[0])
    print(f"checkpoint: {ckpt}")
    print(f"validation velocity RMSE (average over horizon): {v_avg:.4f} m/s")
    report = cfg.out / "train_metrics.json"
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(json.dumps({"variant": cfg.model.variant, "history": history,
                                  "val_v_rmse": v_avg}, indent=2) + "\n")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    from .evaluation import constant_velocity_baseline, horizon_table, koopman_predictions
    from .koopman import load_koopman_model

    model = load_koopman_model(cfg.checkpoint)
    split = DatasetSplit.load(cfg.dataset_dir)
    test = split.test
    table = horizon_table(koopman_predictions(model, test), test.targets)
    base = horizon_table(constant_velocity_baseline(test), test.targets)
    out = cfg.out / "eval_rmse.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out, index=False, lineterminator="\n")
    base.to_csv(cfg.out / "eval_rmse_baseline.csv", index=False, lineterminator="\n")
    print(table.to_string(index=False))
    print(f"constant-velocity baseline average v_rmse: {base.v_rmse.iloc[-1]:.4f}")
    print(f"table: {out}")
    return EXIT_OK


def _sim_model(cfg: RunConfig, scenario):
    from .koopman import load_koopman_model
    from .sim import build_platoon
    if not build_platoon(scenario).controlled_indices():
        return None
    return load_koopman_model(cfg.checkpoint)


def cmd_simulate(cfg: RunConfig) -> int:
    from .sim import oscillation_metrics, run_simulation, write_metrics, write_plots

    sc = cfg.scenario.build(cfg.seed)
    weights, constraints = cfg.weights(), cfg.constraint_set()
    log_ = run_simulation(sc, _sim_model(cfg, sc), weights, constraints)
    out = cfg.out
    paths = [log_.write_csv(out / "simlog.csv"), write_metrics(log_, out / "metrics.json")]
    paths += write_plots(log_, out / "plots")
    m = oscillation_metrics(log_)
    print(f"roster {log_.platoon.codes()}: v_std={m.v_std:.3f} m/s h_std={m.h_std:.3f} m "
          f"mean control time {m.mean_solve_time * 1e3:.2f} ms")
    for p in paths:
        print(f"wrote {p}")
    if log_.collided:
        raise NumericalFailure(f"simulation aborted: {log_.traj.collision['message']}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    from .sim import build_platoon, sweep
    from dataclasses import replace

    sc = cfg.scenario.build(cfg.seed)
    weights, constraints = cfg.weights(), cfg.constraint_set()
    values = cfg.sweep.values
    needs_model = any(build_platoon(replace(sc, **_axis_kw(cfg.sweep.axis, v))).controlled_indices()
                      for v in values)
    model = None
    if needs_model:
        from .koopman import load_koopman_model
        model = load_koopman_model(cfg.checkpoint)
    table = sweep(sc, cfg.sweep.axis, values, model, cfg.sweep.repeats, cfg.jobs, weights, constraints)
    out = cfg.out / f"sweep_{cfg.sweep.axis}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out, index=False, lineterminator="\n")
    print(table.to_string(index=False))
    print(f"table: {out}")
    return EXIT_OK


def _axis_kw(axis: str, value) -> dict:
    return {"penetration": {"penetration": float(value)}, "placement": {"placement": str(value)},
            "controller_count": {"controllers": int(value)}, "comm_mode": {"comm_mode": str(value)}}[axis]


def cmd_inspect(cfg: RunConfig, path: Path | None = None) -> int:
    from .koopman import koopman_spectrum, load_checkpoint, load_koopman_model

    path = path or cfg.checkpoint
    manifest, tensors = load_checkpoint(path)
    spectrum = koopman_spectrum(load_koopman_model(path))
    manifest = {k: v for k, v in manifest.items() if k != "loss_history"}
    print(json.dumps({"checkpoint": str(path), "manifest": manifest,
                      "spectrum": spectrum.to_dict()}, indent=2, default=str))
    return EXIT_OK


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--jobs", type=int, help="parallel runs for sweeps")
    common.add_argument("--variant", choices=["adapkoopnet", "koopnet", "s-adapkoopnet", "edmd"])
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mixedkoop", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate or ingest a windowed dataset")
    t = sub.add_parser("train", parents=[common], help="train a predictor and write a checkpoint")
    t.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")
    sub.add_parser("eval", parents=[common], help="per-horizon RMSE on the test split")
    sub.add_parser("simulate", parents=[common], help="closed-loop run: log CSV, metrics JSON, SVG plots")
    s = sub.add_parser("sweep", parents=[common], help="metrics table over one scenario axis")
    s.add_argument("--axis", help="penetration | placement | controller_count | comm_mode")
    s.add_argument("--values", nargs="+", help="axis values")
    s.add_argument("--repeats", type=int)
    i = sub.add_parser("inspect", parents=[common], help="checkpoint manifest and Koopman spectrum")
    i.add_argument("checkpoint", nargs="?", type=Path)
    return p


def _coerce(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = str(args.out.resolve())
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if args.variant is not None:
        overrides["model.variant"] = args.variant
    if getattr(args, "axis", None):
        overrides["sweep.axis"] = args.axis
    if getattr(args, "values", None):
        overrides["sweep.values"] = [_coerce(v) for v in args.values]
    if getattr(args, "repeats", None):
        overrides["sweep.repeats"] = args.repeats
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg, resume=args.resume)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        return cmd_inspect(cfg, args.checkpoint)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _numeric_errors() as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
