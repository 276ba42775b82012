"""Per-experiment analysis bundle and the CSV / JSON report files built from it.

Every number is written with ``repr`` so repeated runs produce byte-identical files.
Files are written to a temporary name and renamed into place; a failed emission
removes whatever it already wrote.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import __version__
from .analysis import InvarianceReport, TauSearch, invariance_report, penultimate_layer, search_tau, tau_grid
from .config import SCHEMA_VERSION, config_to_dict, experiment_id
from .data import CategoryPartition
from .paradigm import (CELLS, ConfusionQuadrants, EpochStats, ExperimentConfig, ExperimentData, RobustnessReport,
                       evaluate_robustness, prepare_inputs, quadrants_from_predictions)

ROBUSTNESS_HEADER = ["experiment_id", "transform", "num_seen", "cell", "top1", "count"]
CONFUSION_HEADER = ["experiment_id", "true_set", "pred_set", "percent"]
INVARIANCE_HEADER = ["experiment_id", "layer", "unit", "partition", "invariance", "active_count"]
ACTIVE_STATS_HEADER = ["experiment_id", "layer", "kind", "entity_id", "fraction"]
EPOCH_STATS_HEADER = ["experiment_id", "epoch", "train_loss", "holdout_top1", "lr", "weight_decay"]
CALIBRATION_HEADER = ["kind", "param", "top1"]

ANALYSIS_FILES = ("robustness.csv", "confusion.csv", "invariance.csv", "active_stats.csv")


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "" if np.isnan(x) else repr(x)


def _clean(x):
    """JSON-safe scalar: NaN becomes null, numpy types become builtins."""
    if x is None:
        return None
    if isinstance(x, (np.integer, int)) and not isinstance(x, bool):
        return int(x)
    x = float(x)
    return None if np.isnan(x) else x


# --- analysis bundle ------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    experiment_id: str
    config: ExperimentConfig
    partition: CategoryPartition
    robustness: RobustnessReport
    confusion: ConfusionQuadrants | None
    tau: TauSearch
    invariance: InvarianceReport
    penultimate: str
    epoch_stats: list[EpochStats] = field(default_factory=list)


def partial_quadrants(labels, preds, partition: CategoryPartition) -> ConfusionQuadrants | None:
    """Confusion quadrants, or ``None`` when one side of the partition is empty."""
    if not partition.seen or not partition.unseen:
        return None
    return quadrants_from_predictions(labels, preds, partition)


def analyze_experiment(cfg: ExperimentConfig, model, data: ExperimentData, epoch_stats=None) -> ExperimentResult:
    """Robustness cells, confusion quadrants, tau search and invariance for one trained model."""
    spec = cfg.transform_spec
    clean_x = prepare_inputs(data.test)
    trans_x = prepare_inputs(data.test, spec, cfg.seed)
    robustness = evaluate_robustness(model, data.test, spec, data.partition, cfg.seed, inputs=(clean_x, trans_x))
    confusion = partial_quadrants(data.test.labels, model.predict(trans_x), data.partition)
    tau = search_tau(model, clean_x, trans_x, data.test.labels, grid=tau_grid(cfg.tau_step),
                     layers=cfg.ablation_layers)
    inv = invariance_report(model, data.test, spec, data.partition, tau.tau, layers="all", seed=cfg.seed,
                            inputs=(clean_x, trans_x))
    return ExperimentResult(experiment_id(cfg), cfg, data.partition, robustness, confusion, tau, inv,
                            penultimate_layer(model), list(epoch_stats or []))


# --- row builders ---------------------------------------------------------------------------


def robustness_rows(res: ExperimentResult):
    for cell in CELLS:
        c = res.robustness.cells[cell]
        yield [res.experiment_id, res.config.transform, res.config.num_seen, cell, c.top1, c.count]


def confusion_rows(res: ExperimentResult):
    if res.confusion is None:
        return
    for true_set in ("seen", "unseen"):
        for pred_set in ("seen", "unseen"):
            yield [res.experiment_id, true_set, pred_set, res.confusion[(true_set, pred_set)]]


def invariance_rows(res: ExperimentResult):
    for rec in res.invariance.records():
        yield [res.experiment_id, rec.layer, rec.unit, rec.partition, rec.invariance, rec.active_count]


def active_stats_rows(res: ExperimentResult):
    for layer, stats in res.invariance.active.items():
        for uid, frac in zip(stats.unit_ids, stats.images_per_unit):
            yield [res.experiment_id, layer, "images_per_unit", uid, frac]
        for img, frac in enumerate(stats.units_per_image):
            yield [res.experiment_id, layer, "units_per_image", img, frac]


def epoch_stats_rows(exp_id: str, stats):
    for s in stats:
        yield [exp_id, s.epoch, s.train_loss, s.holdout_top1, s.lr, s.weight_decay]


def csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) if not isinstance(v, str) else v for v in row])
    return buf.getvalue().encode("utf-8")


def experiment_summary(res: ExperimentResult) -> dict:
    """The summary.json entry for one experiment."""
    inactive, active = res.tau.at(res.tau.tau)
    confusion = None
    if res.confusion is not None:
        confusion = {t: {p: _clean(res.confusion[(t, p)]) for p in ("seen", "unseen")} for t in ("seen", "unseen")}
    return {
        "experiment_id": res.experiment_id,
        "transform": res.config.transform,
        "num_seen": res.config.num_seen,
        "seed": res.config.seed,
        "seen": list(res.partition.seen),
        "unseen": list(res.partition.unseen),
        "cells": {name: {"top1": _clean(c.top1), "count": c.count} for name, c in res.robustness.cells.items()},
        "tau": {"selected": res.tau.tau, "base_top1": res.tau.base_top1, "inactive_top1": inactive,
                "active_top1": active, "warning": res.tau.warning,
                "trace": [{"tau": t, "inactive_top1": a, "active_top1": b} for t, a, b in res.tau.trace]},
        "penultimate_layer": res.penultimate,
        "invariance": [{k: _clean(v) if k not in ("layer", "partition") else v for k, v in s.items()}
                       for s in res.invariance.summaries()],
        "confusion": confusion,
    }


def summary_document(entries: list[dict]) -> dict:
    return {"schema_version": SCHEMA_VERSION, "tool_version": __version__, "experiments": entries}


def summary_bytes(doc: dict) -> bytes:
    return (json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n").encode("utf-8")


def load_summary_schema() -> dict:
    return json.loads(resources.files("invarilab").joinpath("schemas/summary.schema.json").read_text("utf-8"))


# --- manifest and file output ---------------------------------------------------------------


@dataclass
class RunManifest:
    """Provenance for one output directory.

    ``timings`` is wall-clock data and therefore lives in a sidecar log, keeping
    manifest.json itself reproducible.
    """
    experiment_id: str
    config: dict
    tool_version: str = __version__
    outputs: dict[str, str] = field(default_factory=dict)  # file name -> sha256
    timings: dict[str, float] = field(default_factory=dict)

    @classmethod
    def for_config(cls, cfg: ExperimentConfig) -> "RunManifest":
        return cls(experiment_id(cfg), config_to_dict(cfg))

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "experiment_id": self.experiment_id, "config": self.config,
                "tool_version": self.tool_version, "outputs": dict(sorted(self.outputs.items()))}

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start


class OutputWriter:
    """Atomic file writes into one directory, with rollback of everything written so far."""

    def __init__(self, directory):
        self.directory = os.fspath(directory)
        self.written: list[str] = []
        self.digests: dict[str, str] = {}

    def path(self, name: str) -> str:
        return os.path.join(self.directory, name)

    def write(self, name: str, data: bytes) -> str:
        os.makedirs(self.directory, exist_ok=True)
        target = self.path(name)
        tmp = target + ".tmp"
        try:
            with open(tmp, "wb") as fh:
                fh.write(data)
            os.replace(tmp, target)
        finally:
            if os.path.exists(tmp):
                os.remove(tmp)
        self.written.append(target)
        self.digests[name] = hashlib.sha256(data).hexdigest()
        return target

    def adopt(self, name: str) -> None:
        """Track a file produced by another writer (e.g. a checkpoint)."""
        target = self.path(name)
        self.written.append(target)
        with open(target, "rb") as fh:
            self.digests[name] = hashlib.sha256(fh.read()).hexdigest()

    def rollback(self) -> None:
        for target in reversed(self.written):
            if os.path.exists(target):
                os.remove(target)
        self.written.clear()
        self.digests.clear()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            self.rollback()
        return False


def write_manifest(out: OutputWriter, manifest: RunManifest) -> None:
    manifest.outputs.update(out.digests)
    out.write("manifest.json", summary_bytes(manifest.to_json()))
    lines = "".join(f"{k}\t{v:.3f}\n" for k, v in sorted(manifest.timings.items()))
    out.write("timings.log", lines.encode("utf-8"))


def emit_analysis(out: OutputWriter, results: list[ExperimentResult]) -> None:
    """The four analysis CSVs plus summary.json for a list of experiments."""
    out.write("robustness.csv", csv_bytes(ROBUSTNESS_HEADER, (r for res in results for r in robustness_rows(res))))
    out.write("confusion.csv", csv_bytes(CONFUSION_HEADER, (r for res in results for r in confusion_rows(res))))
    out.write("invariance.csv", csv_bytes(INVARIANCE_HEADER, (r for res in results for r in invariance_rows(res))))
    out.write("active_stats.csv",
              csv_bytes(ACTIVE_STATS_HEADER, (r for res in results for r in active_stats_rows(res))))
    out.write("summary.json", summary_bytes(summary_document([experiment_summary(res) for res in results])))


def emit_reports(directory, manifest: RunManifest, results: list[ExperimentResult]) -> list[str]:
    """Write every report file for ``results`` into ``directory``; returns the paths.

    On any failure the files already written by this call are removed.
    """
    with OutputWriter(directory) as out:
        emit_analysis(out, results)
        if any(res.epoch_stats for res in results):
            out.write("epoch_stats.csv", csv_bytes(
                EPOCH_STATS_HEADER, (r for res in results for r in epoch_stats_rows(res.experiment_id,
                                                                                     res.epoch_stats))))
        write_manifest(out, manifest)
        return list(out.written)


def merge_reports(directories, destination) -> list[str]:
    """Concatenate per-experiment analysis CSVs and summaries into one report directory."""
    tables = {name: [] for name in ANALYSIS_FILES + ("epoch_stats.csv",)}
    headers = {}
    entries = []
    for d in directories:
        for name in tables:
            p = os.path.join(d, name)
            if not os.path.exists(p):
                continue
            with open(p, encoding="utf-8", newline="") as fh:
                rows = list(csv.reader(fh))
            headers.setdefault(name, rows[0])
            if rows[0] != headers[name]:
                raise ValueError(f"{p}: header {rows[0]} does not match {headers[name]}")
            tables[name].extend(rows[1:])
        with open(os.path.join(d, "summary.json"), encoding="utf-8") as fh:
            entries.extend(json.load(fh)["experiments"])
    with OutputWriter(destination) as out:
        for name, rows in tables.items():
            if name in headers:
                buf = io.StringIO()
                writer = csv.writer(buf, lineterminator="\n")
                writer.writerow(headers[name])
                writer.writerows(rows)
                out.write(name, buf.getvalue().encode("utf-8"))
        out.write("summary.json", summary_bytes(summary_document(entries)))
        return list(out.written)

