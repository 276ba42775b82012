"""Seen-/unseen-transformed training paradigm and the within/across-category evaluations."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import nn
from .data import (CategoryPartition, LabeledDataset, SplitConfig, generate_synthetic, load_tensor_archive,
                   partition_categories, split_indices)
from .errors import ConfigError, InputError, NumericError, TrainingError
from .transforms import STOCHASTIC, TransformKind, TransformSpec, apply_transform, image_rng, parse_transform_spec

log = logging.getLogger(__name__)

CELLS = ("clean_seen", "clean_unseen", "trans_seen", "trans_unseen")
LR_GRID_FACTORS = (0.1, 0.3, 1.0, 3.0, 10.0)
WD_GRID = (0.0, 1e-4, 5e-4, 1e-3, 5e-3)


@dataclass
class ExperimentConfig:
    dataset: dict
    transform: str
    num_seen: int
    seed: int = 0
    lineage: list[int] = field(default_factory=list)
    partition_seed: int | None = None
    model: list[dict] = field(default_factory=lambda: [layer.to_dict() for layer in nn.default_layers()])
    transform_probability: float = 0.5
    epochs: int = 45
    lr: float = 0.01
    weight_decay: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 32
    test_fraction: float = 0.2
    holdout_fraction: float = 0.1
    grid_search: bool = False
    ablation_layers: str = "all"
    tau_step: float = 0.05

    @property
    def transform_spec(self) -> TransformSpec:
        return parse_transform_spec(self.transform)

    @property
    def layer_specs(self) -> list[nn.LayerSpec]:
        return [nn.LayerSpec.from_dict(d) for d in self.model]

    @property
    def effective_partition_seed(self) -> int:
        return self.seed if self.partition_seed is None else self.partition_seed


@dataclass
class ExperimentData:
    dataset: LabeledDataset
    train: LabeledDataset
    holdout: LabeledDataset
    test: LabeledDataset
    partition: CategoryPartition


def load_dataset(ref: dict) -> LabeledDataset:
    if "synthetic" in ref:
        s = ref["synthetic"]
        return generate_synthetic(s["category_count"], s["samples_per_category"], s["image_size"], s.get("seed", 0))
    if "archive" in ref:
        ds = load_tensor_archive(ref["archive"])
        ds.validate()
        return ds
    raise ConfigError("dataset needs a 'synthetic' or 'archive' entry")


def build_partition(category_count: int, cfg: ExperimentConfig) -> CategoryPartition:
    seed = cfg.effective_partition_seed
    prev = None
    for n in list(cfg.lineage):
        prev = partition_categories(category_count, n, seed, prev)
    return partition_categories(category_count, cfg.num_seen, seed, prev)


def prepare_experiment(cfg: ExperimentConfig, dataset: LabeledDataset | None = None) -> ExperimentData:
    """Dataset, train/holdout/test split and category partition; all deterministic in the config."""
    dataset = load_dataset(cfg.dataset) if dataset is None else dataset
    train_idx, test_idx = split_indices(dataset.labels, dataset.category_count,
                                        SplitConfig(cfg.test_fraction, cfg.seed))
    train_all = dataset.subset(train_idx)
    fit_idx, hold_idx = split_indices(train_all.labels, dataset.category_count,
                                      SplitConfig(cfg.holdout_fraction, cfg.seed + 1))
    return ExperimentData(dataset, train_all.subset(fit_idx), train_all.subset(hold_idx), dataset.subset(test_idx),
                          build_partition(dataset.category_count, cfg))


# --- data pipeline ------------------------------------------------------------------------


def prepare_inputs(dataset: LabeledDataset, spec: TransformSpec | None = None, seed: int = 0) -> np.ndarray:
    """Standardized NCHW float32 batch, optionally transformed with per-image seeds (seed, index)."""
    out = np.empty((len(dataset),) + _chw(dataset.image_shape), dtype=np.float32)
    for i, img in enumerate(dataset.images):
        if spec is not None and spec.kind is not TransformKind.IDENTITY:
            rng = image_rng(seed, i) if spec.kind in STOCHASTIC else None
            img = apply_transform(img, spec, rng)
        out[i] = nn.prepare_image(img)
    return out


def _chw(shape):
    return (shape[2], shape[0], shape[1]) if len(shape) == 3 else (1,) + tuple(shape)


def make_training_stream(train: LabeledDataset, partition: CategoryPartition, spec: TransformSpec, p: float,
                         rng: np.random.Generator) -> Iterator[tuple[np.ndarray, int, bool]]:
    """One epoch: shuffled (standardized CHW image, label, was_transformed) triples.

    Only seen-category samples are transformed, each with independent probability ``p``,
    before standardization.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"transform probability must lie in [0, 1], got {p}")
    seen = partition.is_seen(train.labels)
    for i in rng.permutation(len(train)):
        img = train.images[i]
        coin = rng.random()
        noise_seed = int(rng.integers(2**31))
        transformed = bool(seen[i]) and coin < p and spec.kind is not TransformKind.IDENTITY
        if transformed:
            img = apply_transform(img, spec, np.random.default_rng(noise_seed) if spec.kind in STOCHASTIC else None)
        yield nn.prepare_image(img), int(train.labels[i]), transformed


def _batches(stream, batch_size):
    xs, ys = [], []
    for x, y, _ in stream:
        xs.append(x)
        ys.append(y)
        if len(xs) == batch_size:
            yield np.stack(xs).astype(np.float32), np.array(ys)
            xs, ys = [], []
    if xs:
        yield np.stack(xs).astype(np.float32), np.array(ys)


def top1(model: nn.Model, inputs: np.ndarray, labels) -> float:
    if len(inputs) == 0:
        return float("nan")
    return 100.0 * float(np.mean(model.predict(inputs) == np.asarray(labels)))


def transformed_accuracy(model: nn.Model, dataset: LabeledDataset, spec: TransformSpec, seed: int = 0) -> float:
    return top1(model, prepare_inputs(dataset, spec, seed), dataset.labels)


# --- training ---------------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    holdout_top1: float
    lr: float
    weight_decay: float


def _mean_loss(model, inputs, labels, batch_size=256):
    total = 0.0
    for i in range(0, len(inputs), batch_size):
        logits = model.forward(inputs[i:i + batch_size]).astype(np.float64)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        total += float(-logp[np.arange(len(logp)), labels[i:i + batch_size]].sum())
    return total / len(inputs)


def _fit(cfg: ExperimentConfig, data: ExperimentData, lr: float, weight_decay: float):
    spec = cfg.transform_spec
    model = nn.build_model(cfg.layer_specs, _chw(data.dataset.image_shape), data.dataset.category_count, cfg.seed)
    state = nn.TrainState.for_model(model, lr, weight_decay, cfg.momentum)
    holdout_x = prepare_inputs(data.holdout)
    train_x = prepare_inputs(data.train)
    stats = [EpochStats(0, _mean_loss(model, train_x, data.train.labels), top1(model, holdout_x, data.holdout.labels),
                        lr, weight_decay)]
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 0x7A, epoch])
        stream = make_training_stream(data.train, data.partition, spec, cfg.transform_probability, rng)
        total, n = 0.0, 0
        for xb, yb in _batches(stream, cfg.batch_size):
            try:
                loss, grads = nn.model_backward(model, xb, yb)
                if not np.isfinite(loss):
                    raise NumericError("non-finite loss")
                nn.sgd_momentum_step(state, model.params, grads)
            except NumericError as exc:
                raise TrainingError(f"training diverged in epoch {epoch}: {exc}", stats) from exc
            total += loss * len(yb)
            n += len(yb)
        state.epoch = epoch
        stats.append(EpochStats(epoch, total / n, top1(model, holdout_x, data.holdout.labels), lr, weight_decay))
        log.info("epoch %d loss %.4f holdout %.2f%%", epoch, stats[-1].train_loss, stats[-1].holdout_top1)
    return model, stats


def grid_candidates(cfg: ExperimentConfig) -> list[tuple[float, float]]:
    return [(cfg.lr * f, wd) for f in LR_GRID_FACTORS for wd in WD_GRID]


def train_experiment(cfg: ExperimentConfig, data: ExperimentData | None = None):
    """Train one network under the paradigm; returns (model, per-epoch stats).

    With ``grid_search`` the 5 x 5 learning-rate / weight-decay grid is scored on the
    held-out slice of the training set and the best pair is used for the final run.
    """
    if cfg.epochs < 0 or cfg.batch_size < 1:
        raise ConfigError("epochs must be >= 0 and batch_size >= 1")
    data = prepare_experiment(cfg) if data is None else data
    lr, wd = cfg.lr, cfg.weight_decay
    if cfg.grid_search:
        best = None
        for cand_lr, cand_wd in grid_candidates(cfg):
            try:
                _, stats = _fit(cfg, data, cand_lr, cand_wd)
            except TrainingError:
                continue
            score = stats[-1].holdout_top1
            if best is None or score > best[0]:
                best = (score, cand_lr, cand_wd)
        if best is None:
            raise TrainingError("every grid-search candidate diverged", [])
        _, lr, wd = best
    return _fit(cfg, data, lr, wd)


# --- evaluation -------------------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    top1: float | None
    count: int


@dataclass
class RobustnessReport:
    cells: dict[str, Cell]

    def top1(self, name):
        return self.cells[name].top1


def robustness_from_predictions(labels, clean_pred, trans_pred, partition: CategoryPartition) -> RobustnessReport:
    labels = np.asarray(labels)
    seen = partition.is_seen(labels)
    cells = {}
    for prefix, pred in (("clean", clean_pred), ("trans", trans_pred)):
        for suffix, mask in (("seen", seen), ("unseen", ~seen)):
            n = int(mask.sum())
            acc = 100.0 * float(np.mean(np.asarray(pred)[mask] == labels[mask])) if n else None
            cells[f"{prefix}_{suffix}"] = Cell(acc, n)
    return RobustnessReport(cells)


def evaluate_robustness(model: nn.Model, test: LabeledDataset, spec: TransformSpec, partition: CategoryPartition,
                        seed: int = 0, inputs=None) -> RobustnessReport:
    """Top-1 accuracy on clean and transformed test images, split by seen/unseen category.

    Cells with no images are reported with ``top1=None`` (absent), never zero.
    """
    clean_x, trans_x = inputs if inputs is not None else (prepare_inputs(test), prepare_inputs(test, spec, seed))
    return robustness_from_predictions(test.labels, model.predict(clean_x), model.predict(trans_x), partition)


@dataclass
class ConfusionQuadrants:
    percent: dict[tuple[str, str], float]
    counts: dict[str, int]

    def __getitem__(self, key):
        return self.percent[key]


def quadrants_from_predictions(labels, preds, partition: CategoryPartition) -> ConfusionQuadrants:
    if not partition.seen or not partition.unseen:
        raise InputError("confusion quadrants need both seen and unseen categories")
    labels, preds = np.asarray(labels), np.asarray(preds)
    true_seen, pred_seen = partition.is_seen(labels), partition.is_seen(preds)
    percent, counts = {}, {}
    for true_name, tmask in (("seen", true_seen), ("unseen", ~true_seen)):
        n = int(tmask.sum())
        counts[true_name] = n
        for pred_name, pmask in (("seen", pred_seen), ("unseen", ~pred_seen)):
            percent[(true_name, pred_name)] = 100.0 * float((tmask & pmask).sum()) / n if n else float("nan")
    return ConfusionQuadrants(percent, counts)


def confusion_quadrants(model: nn.Model, test: LabeledDataset, spec: TransformSpec, partition: CategoryPartition,
                        seed: int = 0, trans_inputs=None) -> ConfusionQuadrants:
    """Seen/unseen set-level confusion of the model on transformed test images."""
    if trans_inputs is None:
        trans_inputs = prepare_inputs(test, spec, seed)
    return quadrants_from_predictions(test.labels, model.predict(trans_inputs), partition)


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **kw)
