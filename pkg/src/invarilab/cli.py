"""Command-line entry point: ``invarilab {synth,calibrate,train,analyze,report,sweep}``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or config error.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from . import __version__, nn
from .config import experiment_id, parse_config, parse_sweep_config
from .data import generate_synthetic, save_tensor_archive
from .errors import ConfigError, InputError, InvarilabError
from .paradigm import ExperimentConfig, prepare_experiment, train_experiment
from .report import (EPOCH_STATS_HEADER, OutputWriter, RunManifest, analyze_experiment, csv_bytes, emit_analysis,
                     epoch_stats_rows, merge_reports, write_manifest)
from .transforms import PARAMETERIZED, TransformKind, calibrate_transform, write_calibration_csv

log = logging.getLogger("invarilab")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
CHECKPOINT_NAME = "model.ilmc"


class UsageError(Exception):
    pass


def _read_text(path: str) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None


def _load_config(path: str) -> ExperimentConfig:
    return parse_config(_read_text(path))


def thread_limit():
    """Cap BLAS threads from INVARILAB_THREADS (unset means no cap)."""
    raw = os.environ.get("INVARILAB_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"INVARILAB_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"INVARILAB_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# --- subcommands ----------------------------------------------------------------------------


def cmd_synth(args) -> int:
    try:
        ds = generate_synthetic(args.categories, args.samples, args.size, args.seed)
    except InputError as exc:
        raise UsageError(str(exc)) from None
    save_tensor_archive(ds, args.out)
    print(f"wrote {len(ds)} images ({args.categories} categories, {args.size}x{args.size}) to {args.out}")
    return EXIT_OK


def run_train(cfg: ExperimentConfig, out_dir: str):
    """Train one experiment into ``out_dir``; returns (model, stats, data)."""
    manifest = RunManifest.for_config(cfg)
    with OutputWriter(out_dir) as out:
        with manifest.stage("data"):
            data = prepare_experiment(cfg)
        with manifest.stage("train"):
            model, stats = train_experiment(cfg, data)
        os.makedirs(out_dir, exist_ok=True)
        nn.save_checkpoint(model, out.path(CHECKPOINT_NAME))
        out.adopt(CHECKPOINT_NAME)
        out.write("epoch_stats.csv", csv_bytes(EPOCH_STATS_HEADER, epoch_stats_rows(manifest.experiment_id, stats)))
        write_manifest(out, manifest)
    return model, stats, data


def run_analyze(cfg: ExperimentConfig, model, out_dir: str, data=None, stats=None):
    manifest = RunManifest.for_config(cfg)
    with OutputWriter(out_dir) as out:
        with manifest.stage("data"):
            data = prepare_experiment(cfg) if data is None else data
        with manifest.stage("analyze"):
            result = analyze_experiment(cfg, model, data, stats)
        emit_analysis(out, [result])
        # train may already have written a manifest here; keep its inventory
        prior = os.path.join(out_dir, "manifest.json")
        if os.path.exists(prior):
            with open(prior, encoding="utf-8") as fh:
                manifest.outputs.update(json.load(fh).get("outputs", {}))
        write_manifest(out, manifest)
    return result


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    _, stats, _ = run_train(cfg, args.out_dir)
    print(f"experiment {experiment_id(cfg)}: final holdout top-1 {stats[-1].holdout_top1:.2f}%")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _load_config(args.config)
    model = nn.load_checkpoint(args.checkpoint)
    result = run_analyze(cfg, model, args.out_dir)
    cells = ", ".join(f"{k}={'absent' if c.top1 is None else f'{c.top1:.2f}'}"
                      for k, c in result.robustness.cells.items())
    print(f"experiment {result.experiment_id}: tau={result.tau.tau:g}; {cells}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _load_config(args.config)
    kind = TransformKind(args.kind)
    if kind not in PARAMETERIZED:
        raise UsageError(f"{kind.value} has no parameter to calibrate")
    baseline_cfg = dataclasses.replace(cfg, transform="identity", num_seen=0, lineage=[])
    data = prepare_experiment(baseline_cfg)
    if args.checkpoint:
        model = nn.load_checkpoint(args.checkpoint)
    else:
        model, _ = train_experiment(baseline_cfg, data)
    result = calibrate_transform(kind, args.step, model, data.test, args.threshold, seed=cfg.seed,
                                 max_steps=args.max_steps)
    buf = io.StringIO()
    write_calibration_csv(result, buf)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    with OutputWriter(out_dir) as out:
        out.write(os.path.basename(args.out), buf.getvalue().encode("utf-8"))
    print(f"{kind.value}: param {result.chosen_param:g} gives top-1 {100 * result.trace[-1][1]:.2f}%")
    return EXIT_OK


def cmd_report(args) -> int:
    for d in args.inputs:
        if not os.path.exists(os.path.join(d, "summary.json")):
            raise UsageError(f"{d} has no summary.json; run analyze first")
    written = merge_reports(args.inputs, args.out_dir)
    print(f"wrote {len(written)} files to {args.out_dir}")
    return EXIT_OK


def _sweep_one(cfg: ExperimentConfig, root: str) -> str:
    exp_dir = os.path.join(root, experiment_id(cfg))
    model, stats, data = run_train(cfg, exp_dir)
    run_analyze(cfg, model, exp_dir, data, stats)
    return exp_dir


def run_sweep(sweep, out_dir: str, jobs: int = 1) -> list[str]:
    """Train and analyze every (seed, num_seen) pair, then merge the reports into ``out_dir``."""
    configs = sweep.experiments()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            dirs = list(pool.map(_sweep_one, configs, [out_dir] * len(configs)))
    else:
        dirs = [_sweep_one(cfg, out_dir) for cfg in configs]
    merge_reports(dirs, out_dir)
    return dirs


def cmd_sweep(args) -> int:
    sweep = parse_sweep_config(_read_text(args.config))
    dirs = run_sweep(sweep, args.out_dir, args.jobs)
    print(f"{len(dirs)} experiments; merged report in {args.out_dir}")
    return EXIT_OK


# --- entry point ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="invarilab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"invarilab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic glyph dataset archive")
    s.add_argument("--categories", type=int, default=10)
    s.add_argument("--samples", type=int, default=200, help="images per category")
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("calibrate", help="sweep a transform parameter against an untransformed baseline")
    s.add_argument("--config", required=True)
    s.add_argument("--kind", required=True, choices=sorted(k.value for k in PARAMETERIZED))
    s.add_argument("--step", type=float, default=None, help="sweep increment (default per kind)")
    s.add_argument("--threshold", type=float, default=0.10, help="target top-1 as a fraction")
    s.add_argument("--max-steps", type=int, default=100)
    s.add_argument("--checkpoint", help="baseline checkpoint; trained from the config when omitted")
    s.add_argument("--out", required=True, help="calibration CSV path")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("train", help="train one experiment")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("analyze", help="robustness, confusion and invariance analysis of a checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("report", help="merge analyzed experiment directories")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("sweep", help="train and analyze across a nested num_seen grid")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--jobs", type=int, default=1, help="parallel experiment processes")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with thread_limit():
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"invarilab {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvarilabError, OSError, ValueError) as exc:
        print(f"invarilab {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
