"""Command-line entry point: ``terradyn <subcommand>``.

Every subcommand resolves its settings (CLI flag > config file > default),
writes the resolved settings to ``resolved_config.ini`` next to its
outputs, and can be rerun from that snapshot with ``--config``.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

SNAPSHOT = "resolved_config.ini"

DEFAULTS = {
    "world": {"seed": 0, "extent": 300.0, "n_classes": 6, "max_slope_deg": 15.0,
              "residual_amplitude": 0.05, "pca_samples": 4000, "n_pca": 40},
    "dataset": {"seed": 0, "n_logs": 8, "duration": 250.0, "stride": 0.5, "segment_s": 50.0,
                "test_every": 5},
    "eval": {"buckets": "hindsight", "labels": ""},
    "ablate": {"axis": "compression_size", "values": "2,4,8,16"},
    "plan": {"goal_x": 25.0, "goal_y": 0.0, "steps": 500, "runs": 1, "bucket": "hindsight",
             "start_spacing": 20.0},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- configuration ---------------------------------------------------------------------------

def _coerce(value, default):
    if isinstance(default, bool):
        return str(value).lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(float(v) for v in str(value).strip("()[] ").split(",") if v.strip())
    return str(value)


def _section_defaults(section):
    from .mppi import PlannerConfig
    from .training import TrainingConfig
    if section == "train":
        return {f.name: getattr(TrainingConfig(), f.name) for f in dataclasses.fields(TrainingConfig)}
    if section == "plan":
        base = {f.name: getattr(PlannerConfig(), f.name) for f in dataclasses.fields(PlannerConfig)}
        base.update(DEFAULTS["plan"])
        return base
    return dict(DEFAULTS[section])


def resolve(section, config_path, overrides):
    """Merge defaults, the config file section and CLI overrides (later wins)."""
    values = _section_defaults(section)
    sources = [values]
    if config_path:
        cp = configparser.ConfigParser()
        if not cp.read(config_path):
            raise UsageError(f"cannot read config file {config_path}")
        if cp.has_section(section):
            sources.append(dict(cp[section]))
    sources.append({k: v for k, v in overrides.items() if v is not None})
    out = dict(values)
    for src in sources[1:]:
        for key, val in src.items():
            if key not in values:
                raise UsageError(f"unknown setting {section}.{key}")
            out[key] = _coerce(val, values[key])
    return out


def _paths_from_config(config_path):
    if not config_path:
        return {}
    cp = configparser.ConfigParser()
    cp.read(config_path)
    return dict(cp["paths"]) if cp.has_section("paths") else {}


def write_snapshot(out_dir, command, section, settings, paths):
    cp = configparser.ConfigParser()
    cp["run"] = {"command": command}
    cp["paths"] = {k: str(v) for k, v in paths.items() if v is not None}
    cp[section] = {k: (",".join(repr(float(x)) for x in v) if isinstance(v, (tuple, list)) else str(v))
                   for k, v in settings.items()}
    path = Path(out_dir) / SNAPSHOT
    with open(path, "w") as fh:
        cp.write(fh)
    return path


def _parse_sets(items):
    out = {}
    for item in items or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = val.strip()
    return out


def _need(path, what):
    if path is None:
        raise UsageError(f"missing {what}")
    if not Path(path).exists():
        raise UsageError(f"{what} {path} does not exist")
    return Path(path)


def _out_dir(args, paths):
    out = args.out or paths.get("out")
    if out is None:
        raise UsageError("missing --out directory")
    Path(out).mkdir(parents=True, exist_ok=True)
    return Path(out)


def _run_log(out_dir, lines):
    (Path(out_dir) / "run.log").write_text("\n".join(lines) + "\n")


# --- subcommands -------------------------------------------------------------------------------

def cmd_genworld(args):
    from . import world
    from .features import pca_fit
    paths = _paths_from_config(args.config)
    out = _out_dir(args, paths)
    s = resolve("world", args.config, {"seed": args.seed, **_parse_sets(args.set)})
    terrain = world.generate_terrain(seed=s["seed"], extent=s["extent"], n_classes=s["n_classes"],
                                     max_slope_deg=s["max_slope_deg"],
                                     residual_amplitude=s["residual_amplitude"])
    basis = pca_fit(world.pca_samples(terrain, s["pca_samples"], seed=s["seed"]), s["n_pca"])
    (out / "world.bin").write_bytes(world.terrain_to_bytes(terrain))
    from . import binio
    binio.write(out / "pca.bin", "weights", basis.arrays(), {"n_vfm": basis.n_vfm, "n_pca": basis.n_pca})
    write_snapshot(out, "genworld", "world", s, {"out": out})
    _run_log(out, [f"terrain seed {s['seed']} classes {list(terrain.class_names)}",
                   f"drift scale {terrain.features.drift_scale!r}", f"pca {basis.n_vfm}->{basis.n_pca}"])
    return 0


def _load_world(world_dir):
    from . import binio, world
    from .features import PcaBasis
    d = _need(world_dir, "world directory")
    terrain = world.terrain_from_bytes((d / "world.bin").read_bytes())
    _, _, _, arrays = binio.read(d / "pca.bin", expect_kind="weights")
    return terrain, PcaBasis.from_arrays(arrays)


def cmd_dataset(args):
    from . import world
    paths = _paths_from_config(args.config)
    world_dir = args.world or paths.get("world")
    terrain, basis = _load_world(world_dir)
    out = _out_dir(args, paths)
    s = resolve("dataset", args.config, {"seed": args.seed, **_parse_sets(args.set)})
    seeds = [s["seed"] * 1000 + i for i in range(s["n_logs"])]
    logs = world.drive_many(terrain, seeds, s["duration"])
    ds = world.extract_dataset(logs, terrain, basis, stride=s["stride"], segment_s=s["segment_s"],
                               test_every=s["test_every"])
    ds.meta.update({"world": str(world_dir)})
    ds.save(out)
    write_snapshot(out, "dataset", "dataset", s, {"world": world_dir, "out": out})
    _run_log(out, [f"{len(logs)} logs, {len(ds)} samples ({int(np.sum(ds.split == 0))} train)"])
    return 0


def cmd_train(args):
    from .hybrid import save_model
    from .training import TrainingConfig, train
    from .world import TrajectoryDataset
    paths = _paths_from_config(args.config)
    data_dir = _need(args.dataset or paths.get("dataset"), "dataset directory")
    out = _out_dir(args, paths)
    over = {"seed": args.seed, "epochs": args.epochs, "feature_mode": args.mode,
            "distance_mode": args.distance, **_parse_sets(args.set)}
    s = resolve("train", args.config, over)
    cfg = TrainingConfig(**s)
    ds = TrajectoryDataset.load(data_dir)
    res = train(ds, cfg)
    save_model(out / "weights.bin", res.model, {"training": cfg.as_dict()})
    (out / "metrics.txt").write_text(res.metrics_text())
    write_snapshot(out, "train", "train", cfg.as_dict(), {"dataset": data_dir, "out": out})
    _run_log(out, [f"mode {cfg.feature_mode}/{cfg.distance_mode}", f"epochs {cfg.epochs}"])
    return 0


def _eval_outputs(out, reports, name):
    from .training import format_reports
    (out / f"{name}.txt").write_text(format_reports(reports))
    keys = list(reports[0].summary()) if reports else []
    rows = ["\t".join(keys)] + ["\t".join(str(r.summary()[k]) for k in keys) for r in reports]
    (out / f"{name}.tsv").write_text("\n".join(rows) + "\n")
    (out / f"{name}.json").write_text(json.dumps([r.summary() for r in reports], indent=2, sort_keys=True) + "\n")


def cmd_eval(args):
    from .hybrid import load_model
    from .training import evaluate
    from .world import TrajectoryDataset, bucket_index
    paths = _paths_from_config(args.config)
    data_dir = _need(args.dataset or paths.get("dataset"), "dataset directory")
    weights = args.weights or [w for w in paths.get("weights", "").split(",") if w]
    if not weights:
        raise UsageError("missing --weights")
    weights = [str(_need(w, "weights file")) for w in weights]
    out = _out_dir(args, paths)
    s = resolve("eval", args.config, {"buckets": args.buckets, **_parse_sets(args.set)})
    buckets = [b.strip() for b in s["buckets"].split(",") if b.strip()]
    for b in buckets:
        try:
            bucket_index(b)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    labels = [x for x in s["labels"].split(",") if x] or [Path(w).parent.name for w in weights]
    ds = TrajectoryDataset.load(data_dir)
    reports = []
    for w, label in zip(weights, labels):
        model, _ = load_model(w)
        reports += [evaluate(model, ds, b, label=label) for b in buckets]
    _eval_outputs(out, reports, "report")
    write_snapshot(out, "eval", "eval", s, {"dataset": data_dir, "weights": ",".join(weights), "out": out})
    _run_log(out, [f"{len(reports)} reports"])
    return 0


def cmd_ablate(args):
    from .training import TrainingConfig, ablation_sweep
    from .world import TrajectoryDataset
    paths = _paths_from_config(args.config)
    data_dir = _need(args.dataset or paths.get("dataset"), "dataset directory")
    out = _out_dir(args, paths)
    sets = _parse_sets(args.set)
    s = resolve("ablate", args.config, {"axis": args.axis, "values": args.values,
                                        **{k: v for k, v in sets.items() if k in ("axis", "values")}})
    t = resolve("train", args.config, {"seed": args.seed, "epochs": args.epochs,
                                       **{k: v for k, v in sets.items() if k not in ("axis", "values")}})
    if args.workers < 1:
        raise UsageError("--workers must be at least 1")
    if s["axis"] not in ("compression_size", "n_pca"):
        raise UsageError("axis must be compression_size or n_pca")
    values = [int(v) for v in s["values"].split(",") if v.strip()]
    ds = TrajectoryDataset.load(data_dir)
    reports = ablation_sweep(ds, s["axis"], values, TrainingConfig(**t), workers=args.workers)
    _eval_outputs(out, reports, "ablation")
    write_snapshot(out, "ablate", "ablate", s, {"dataset": data_dir, "out": out})
    cp = configparser.ConfigParser()
    cp.read(out / SNAPSHOT)
    cp["train"] = {k: (",".join(repr(float(x)) for x in v) if isinstance(v, (tuple, list)) else str(v))
                   for k, v in TrainingConfig(**t).as_dict().items()}
    with open(out / SNAPSHOT, "w") as fh:
        cp.write(fh)
    return 0


def cmd_plan(args):
    from .hybrid import Trajectory, load_model
    from .mppi import PlannerConfig, receding_horizon_drive
    paths = _paths_from_config(args.config)
    terrain, basis = _load_world(args.world or paths.get("world"))
    weights = args.weights or paths.get("weights")
    model, _ = load_model(_need(weights, "weights file"))
    out = _out_dir(args, paths)
    s = resolve("plan", args.config, {"seed": args.seed, **_parse_sets(args.set)})
    fields = {f.name for f in dataclasses.fields(PlannerConfig)}
    cfg = PlannerConfig(**{k: v for k, v in s.items() if k in fields})
    lines, summary = [], []
    for run in range(s["runs"]):
        start = np.array([0.0, run * s["start_spacing"], 0.0, 0.0, 0.0, 0.0])
        goal = start[:2] + [s["goal_x"], s["goal_y"]]
        res = receding_horizon_drive(model, terrain, goal, s["steps"], cfg, basis=basis, start=start,
                                     bucket=s["bucket"], feature_seed=s["seed"])
        n = len(res.controls)
        traj = Trajectory(np.arange(n + 1) * cfg.dt, res.states, res.actuators,
                          np.vstack([res.controls, np.zeros((1, 3))]),
                          np.zeros((n + 1, 4, 0)), np.ones((n + 1, 4)))
        (out / f"trajectory_{run:03d}.bin").write_bytes(traj.to_bytes())
        summary.append({"run": run, "reached": res.reached, "time_to_goal": res.time_to_goal,
                        "steps": res.steps, "tracking_error": res.tracking_error})
        lines.append(f"run {run}: reached={res.reached} time={res.time_to_goal} "
                     f"tracking={res.tracking_error:.4f}")
    (out / "plan.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_snapshot(out, "plan", "plan", s, {"world": args.world or paths.get("world"),
                                            "weights": weights, "out": out})
    _run_log(out, lines)
    return 0


# --- parser -----------------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="terradyn", description="Terrain-aware hybrid vehicle dynamics toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="INI config or a resolved_config.ini snapshot")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any setting of this subcommand")

    sp = sub.add_parser("genworld", help="generate a synthetic world and its PCA basis")
    common(sp)
    sp.set_defaults(func=cmd_genworld)

    sp = sub.add_parser("dataset", help="drive the world and extract a trajectory dataset")
    common(sp)
    sp.add_argument("--world")
    sp.set_defaults(func=cmd_dataset)

    sp = sub.add_parser("train", help="train a hybrid model")
    common(sp)
    sp.add_argument("--dataset")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--mode", choices=("none", "direct", "compressed"))
    sp.add_argument("--distance", choices=("hindsight", "randomized"))
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate trained models per distance bucket")
    common(sp)
    sp.add_argument("--dataset")
    sp.add_argument("--weights", action="append")
    sp.add_argument("--buckets", help="comma-separated buckets, e.g. hindsight,0m,10m")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="sweep encoder size or PCA size")
    common(sp)
    sp.add_argument("--dataset")
    sp.add_argument("--axis", choices=("compression_size", "n_pca"))
    sp.add_argument("--values")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--workers", type=int, default=1, help="parallel training runs (results are identical)")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("plan", help="closed-loop MPPI driving in the synthetic world")
    common(sp)
    sp.add_argument("--world")
    sp.add_argument("--weights")
    sp.set_defaults(func=cmd_plan)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        t0 = time.perf_counter()
        code = args.func(args)
        logging.getLogger("terradyn").info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
        return code
    except UsageError as exc:
        print(f"terradyn: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure: report and return a distinct status
        print(f"terradyn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
