"""Neuron-level invariance: activation capture, activity thresholds, ablation, tau search.

Activation matrices are units x images.  A convolutional unit is one (channel, y, x)
position of a post-ReLU feature map.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import nn
from .data import CategoryPartition, LabeledDataset
from .errors import ConfigError, InputError
from .transforms import TransformSpec

PARTITIONS = ("all", "seen", "unseen")
MAX_DROP = 1.0  # percentage points


def tau_grid(step: float = 0.05) -> np.ndarray:
    n = int(round(1.0 / step))
    return np.round(np.arange(n + 1) * step, 10)


@dataclass
class ActivationMatrix:
    layer: str
    values: np.ndarray  # units x images, float64
    image_index: np.ndarray

    @property
    def unit_count(self) -> int:
        return self.values.shape[0]

    @property
    def image_count(self) -> int:
        return self.values.shape[1]

    def columns(self, idx) -> "ActivationMatrix":
        idx = np.asarray(idx)
        return ActivationMatrix(self.layer, self.values[:, idx], self.image_index[idx])


def penultimate_layer(model: nn.Model) -> str:
    """The last hidden fully-connected layer, or the last hidden layer if there is none."""
    names = model.hidden_layer_names()
    fc = [n for n in names if n.startswith("fc")]
    if not names:
        raise ConfigError("model has no hidden layers")
    return fc[-1] if fc else names[-1]


def resolve_layers(model: nn.Model, layers=None) -> list[str]:
    names = model.hidden_layer_names()
    if layers is None or layers == "all":
        return names
    if layers == "penultimate":
        return [penultimate_layer(model)]
    out = []
    for sel in ([layers] if isinstance(layers, (str, int)) else layers):
        if isinstance(sel, int):
            if not -len(names) <= sel < len(names):
                raise ConfigError(f"layer index {sel} out of range for {len(names)} hidden layers")
            out.append(names[sel])
        elif sel == "penultimate":
            out.append(penultimate_layer(model))
        elif sel in names:
            out.append(sel)
        else:
            raise ConfigError(f"unknown layer {sel!r}; hidden layers are {names}")
    return out


def collect_activations(model: nn.Model, inputs, layers=None, batch_size: int = 256) -> dict[str, ActivationMatrix]:
    """Post-ReLU activations of the selected hidden layers for a batch of prepared images."""
    names = resolve_layers(model, layers)
    chunks: dict[str, list] = {n: [] for n in names}
    for i in range(0, len(inputs), batch_size):
        trace = nn.forward_collect(model, inputs[i:i + batch_size])
        for n in names:
            act = trace.hidden[n]
            chunks[n].append(act.reshape(act.shape[0], -1).T.astype(np.float64))
    index = np.arange(len(inputs))
    return {n: ActivationMatrix(n, np.concatenate(chunks[n], axis=1) if chunks[n] else np.zeros((0, 0)), index)
            for n in names}


# --- thresholds and active sets -----------------------------------------------------------


@dataclass
class ThresholdConfig:
    tau: float
    thresholds: np.ndarray  # per unit


@dataclass
class ActiveSet:
    mask: np.ndarray  # units x images, True where image j is in unit i's active set

    def members(self, unit: int) -> set[int]:
        return set(np.flatnonzero(self.mask[unit]).tolist())

    @property
    def sizes(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def _check_aligned(orig: ActivationMatrix, trans: ActivationMatrix):
    if orig.values.shape != trans.values.shape:
        raise InputError(f"activation matrices misaligned: {orig.values.shape} vs {trans.values.shape}")
    if not np.array_equal(orig.image_index, trans.image_index):
        raise InputError("activation matrices cover different images")


def compute_thresholds(orig: ActivationMatrix, trans: ActivationMatrix, tau: float):
    """Per-unit thresholds tau * max(orig, trans) and the resulting active sets.

    An image is active for a unit when either version reaches the threshold; a zero
    threshold requires strictly positive activity, so silent units stay empty.
    """
    _check_aligned(orig, trans)
    if not 0.0 <= tau <= 1.0:
        raise InputError(f"tau must lie in [0, 1], got {tau}")
    both = np.maximum(orig.values, trans.values)
    th = tau * both.max(axis=1) if both.size else np.zeros(both.shape[0])
    mask = (both >= th[:, None]) & (both > 0)
    return ThresholdConfig(tau, th), ActiveSet(mask)


@dataclass
class ActiveStats:
    images_per_unit: np.ndarray  # |A_i| / m for units with a nonempty active set
    units_per_image: np.ndarray  # |{i : j in A_i}| / units for every image
    unit_ids: np.ndarray


def active_stats(active: ActiveSet) -> ActiveStats:
    units, images = active.mask.shape
    sizes = active.sizes
    keep = np.flatnonzero(sizes > 0)
    per_unit = sizes[keep] / images if images else np.zeros(0)
    per_image = active.mask.sum(axis=0) / units if units else np.zeros(images)
    return ActiveStats(per_unit.astype(np.float64), per_image.astype(np.float64), keep)


# --- ablation ------------------------------------------------------------------------------


def _ablation_hook(thresholds: dict[str, np.ndarray], mode: str):
    if mode not in ("inactive", "active"):
        raise ConfigError(f"ablation mode must be 'inactive' or 'active', got {mode!r}")

    def hook(name, act):
        th = thresholds.get(name)
        if th is None:
            return act
        flat = act.reshape(act.shape[0], -1)
        drop = flat < th[None, :] if mode == "inactive" else flat >= th[None, :]
        return np.where(drop, 0, flat).astype(act.dtype).reshape(act.shape)
    return hook


def ablate_evaluate(model: nn.Model, inputs, labels, thresholds: dict[str, np.ndarray], mode: str,
                    batch_size: int = 256) -> float:
    """Top-1 accuracy (%) with inactive (below Th) or active (>= Th) units zeroed per image."""
    hook = _ablation_hook(thresholds, mode)
    labels = np.asarray(labels)
    correct = 0
    for i in range(0, len(inputs), batch_size):
        logits = model.forward(inputs[i:i + batch_size], hook=hook)
        correct += int((np.argmax(logits, axis=1) == labels[i:i + batch_size]).sum())
    return 100.0 * correct / len(labels)


@dataclass
class TauSearch:
    tau: float
    base_top1: float
    trace: list[tuple[float, float, float]] = field(default_factory=list)  # (tau, inactive, active)
    warning: bool = False

    def at(self, tau: float) -> tuple[float, float]:
        for t, inactive, active in self.trace:
            if abs(t - tau) < 1e-12:
                return inactive, active
        raise KeyError(tau)


def select_tau(inactive_by_tau: Sequence[tuple[float, float]], base_top1: float,
               max_drop: float = MAX_DROP) -> tuple[float, bool]:
    """Highest tau whose inactive-ablation accuracy stays within ``max_drop`` points of base."""
    ok = [t for t, acc in inactive_by_tau if base_top1 - acc <= max_drop + 1e-9]
    if not ok:
        return 0.0, True
    return max(ok), False


def search_tau(model: nn.Model, orig_inputs, trans_inputs, labels, grid=None, layers="all") -> TauSearch:
    """Grid search for the activity threshold.

    Thresholds come from the original and transformed activations together; accuracy
    is measured on both image sets, ablating every selected hidden layer at once.
    """
    grid = tau_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    names = resolve_layers(model, layers)
    orig = collect_activations(model, orig_inputs, names)
    trans = collect_activations(model, trans_inputs, names)
    eval_x = np.concatenate([orig_inputs, trans_inputs])
    eval_y = np.concatenate([np.asarray(labels), np.asarray(labels)])
    base = 100.0 * float(np.mean(model.predict(eval_x) == eval_y))
    trace = []
    for tau in grid:
        th = {n: compute_thresholds(orig[n], trans[n], float(tau))[0].thresholds for n in names}
        trace.append((float(tau), ablate_evaluate(model, eval_x, eval_y, th, "inactive"),
                      ablate_evaluate(model, eval_x, eval_y, th, "active")))
    tau, warn = select_tau([(t, a) for t, a, _ in trace], base)
    if warn:
        warnings.warn("no tau keeps inactive-ablation accuracy within 1 point; using tau = 0")
    return TauSearch(tau, base, trace, warn)


# --- invariance -----------------------------------------------------------------------------


@dataclass(frozen=True)
class InvarianceRecord:
    unit: int
    layer: str
    partition: str
    invariance: float | None
    active_count: int


@dataclass
class LayerInvariance:
    layer: str
    partition: str
    invariance: np.ndarray  # per unit, NaN where the active set is empty
    active_count: np.ndarray

    def records(self) -> Iterator[InvarianceRecord]:
        for u in np.flatnonzero(self.active_count > 0):
            yield InvarianceRecord(int(u), self.layer, self.partition, float(self.invariance[u]),
                                   int(self.active_count[u]))

    @property
    def present(self) -> np.ndarray:
        return self.invariance[self.active_count > 0]

    def summary(self) -> dict:
        vals = self.present
        n = len(vals)
        return {"layer": self.layer, "partition": self.partition, "units": n,
                "mean": float(vals.mean()) if n else None,
                "stderr": float(vals.std(ddof=1) / np.sqrt(n)) if n > 1 else None}


def invariance_values(orig: ActivationMatrix, trans: ActivationMatrix, active: ActiveSet):
    """Vectorized coefficients: (per-unit mean of 1 - |t - o| / (t + o) over active images, counts)."""
    _check_aligned(orig, trans)
    o, t = orig.values, trans.values
    if (o < 0).any() or (t < 0).any():
        raise InputError("negative activation: invariance expects post-ReLU values")
    if active.mask.shape != o.shape:
        raise InputError(f"active set shape {active.mask.shape} does not match activations {o.shape}")
    denom = t + o
    with np.errstate(invalid="ignore", divide="ignore"):
        score = np.where(denom > 0, 1.0 - np.abs(t - o) / np.where(denom > 0, denom, 1.0), 1.0)
    counts = active.mask.sum(axis=1)
    sums = np.where(active.mask, score, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        inv = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return inv, counts


def invariance_coefficients(orig: ActivationMatrix, trans: ActivationMatrix, active: ActiveSet,
                            partition: str = "all") -> list[InvarianceRecord]:
    """One record per unit; units with an empty active set get ``invariance=None``."""
    inv, counts = invariance_values(orig, trans, active)
    return [InvarianceRecord(u, orig.layer, partition, float(inv[u]) if counts[u] else None, int(counts[u]))
            for u in range(len(inv))]


@dataclass
class InvarianceReport:
    tau: float
    layers: list[str]
    results: dict[tuple[str, str], LayerInvariance]
    active: dict[str, ActiveStats]  # "all"-partition active-set statistics per layer, plus "network"

    def summaries(self) -> list[dict]:
        return [res.summary() for res in self.results.values()]

    def mean(self, layer: str, partition: str = "all") -> float | None:
        res = self.results.get((layer, partition))
        return None if res is None else res.summary()["mean"]

    def records(self) -> Iterator[InvarianceRecord]:
        for res in self.results.values():
            yield from res.records()


def invariance_report(model: nn.Model, test: LabeledDataset, spec: TransformSpec, partition: CategoryPartition,
                      tau: float, layers=None, seed: int = 0, inputs=None) -> InvarianceReport:
    """Invariance per layer over all test images and over the seen and unseen subsets.

    Thresholds are recomputed on every subset.
    """
    from .paradigm import prepare_inputs

    names = resolve_layers(model, layers)
    orig_x, trans_x = inputs if inputs is not None else (prepare_inputs(test), prepare_inputs(test, spec, seed))
    orig = collect_activations(model, orig_x, names)
    trans = collect_activations(model, trans_x, names)
    seen = partition.is_seen(test.labels)
    subsets = {"all": np.arange(len(test)), "seen": np.flatnonzero(seen), "unseen": np.flatnonzero(~seen)}
    results = {}
    active_out = {}
    net_masks = []
    for name in names:
        for part in PARTITIONS:
            idx = subsets[part]
            if len(idx) == 0:
                continue
            o, t = orig[name].columns(idx), trans[name].columns(idx)
            _, active = compute_thresholds(o, t, tau)
            inv, counts = invariance_values(o, t, active)
            results[(name, part)] = LayerInvariance(name, part, inv, counts)
            if part == "all":
                active_out[name] = active_stats(active)
                net_masks.append(active.mask)
    if net_masks:
        active_out["network"] = active_stats(ActiveSet(np.concatenate(net_masks, axis=0)))
    return InvarianceReport(tau, names, results, active_out)


def spearman(x, y) -> float:
    """Spearman rank correlation; NaN when either input is constant."""
    from scipy.stats import spearmanr

    if len(set(np.asarray(x).tolist())) < 2 or len(set(np.asarray(y).tolist())) < 2:
        return float("nan")
    return float(spearmanr(x, y).statistic)
