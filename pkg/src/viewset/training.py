"""Joint optimization of the view-set classifier.

The schedule is a warm-restarted cosine: within each restart interval the
learning rate climbs linearly from zero to the cycle's peak during the
warmup epochs, then follows a half-cosine down to zero; after every
interval the peak decays by a fixed fraction. Parameters are stepped by
AdamW (decoupled weight decay, bias-corrected moments).

Batches group whole shapes: all sampled views of a shape stay together
and the loss is averaged over the shapes in the batch. Everything is
driven by one seed; per-epoch shuffling/sampling and per-shape evaluation
sampling derive their generators from it with fixed offsets.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .data import Dataset, ViewFeatureSet
from .model import Model

log = logging.getLogger(__name__)

# fixed seed offsets so each consumer gets an independent stream
SEED_INIT = 1
SEED_EPOCH = 2
SEED_EVAL = 3


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; message names the offending batch."""


@dataclass
class TrainConfig:
    epochs: int = 300
    peak_lr: float = 1e-3
    restart_interval: int = 100
    warmup_epochs: int = 5
    peak_decay: float = 0.4
    weight_decay: float = 1e-2
    batch_size: int = 32
    seed: int = 0
    views_per_shape: int | None = None  # None: use every stored view
    freeze_adapter: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.warmup_epochs < self.restart_interval:
            raise ValueError("need 0 < warmup_epochs < restart_interval")
        if not 0.0 <= self.peak_decay < 1.0:
            raise ValueError("peak_decay must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.views_per_shape is not None and self.views_per_shape < 1:
            raise ValueError("views_per_shape must be >= 1")


@dataclass
class AccuracyReport:
    instance_accuracy: float
    class_accuracy: float
    per_class: np.ndarray  # NaN for classes with no items


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    eval_instance: float
    eval_class: float

    def as_line(self) -> str:
        return (f"{self.epoch}\t{self.lr:.10g}\t{self.train_loss:.10g}\t"
                f"{self.eval_instance:.6f}\t{self.eval_class:.6f}")


@dataclass
class TrainResult:
    log: list[EpochRecord]
    best_instance: float
    best_class: float
    best_epoch: int
    best_state: tuple[dict, dict]
    final_state: tuple[dict, dict]


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for the given epoch under the warm-restart schedule."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    cycle, e = divmod(epoch, cfg.restart_interval)
    peak = cfg.peak_lr * (1.0 - cfg.peak_decay) ** cycle
    if e < cfg.warmup_epochs:
        return peak * (e + 1) / cfg.warmup_epochs
    span = cfg.restart_interval - cfg.warmup_epochs
    return peak * 0.5 * (1.0 + math.cos(math.pi * (e - cfg.warmup_epochs) / span))


class AdamW:
    """Decoupled weight decay Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Node], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        b1c = 1.0 - cfg.adam_beta1 ** self.t
        b2c = 1.0 - cfg.adam_beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = cfg.adam_beta1 * self.m[k] + (1.0 - cfg.adam_beta1) * g
            self.v[k] = cfg.adam_beta2 * self.v[k] + (1.0 - cfg.adam_beta2) * g * g
            mhat = self.m[k] / b1c
            vhat = self.v[k] / b2c
            p.value -= lr * (mhat / (np.sqrt(vhat) + cfg.adam_eps)
                             + cfg.weight_decay * p.value)


def sample_views(shape: ViewFeatureSet, m: int,
                 rng: np.random.Generator) -> ViewFeatureSet:
    """Uniform subset of m views, without replacement."""
    avail = shape.num_views
    if not 1 <= m <= avail:
        raise ValueError(
            f"cannot sample {m} views from shape {shape.shape_id} with {avail}")
    idx = rng.choice(avail, size=m, replace=False)
    return ViewFeatureSet(shape_id=shape.shape_id,
                          features=shape.features[idx],
                          label=shape.label, sublabel=shape.sublabel)


def _eval_rng(base_seed: int, shape_id: str) -> np.random.Generator:
    # per-shape stream: evaluation sampling must not depend on dataset order
    return np.random.default_rng(
        (base_seed + SEED_EVAL) * 0x1_0000_0000 + zlib.crc32(shape_id.encode()))


def eval_view_subset(shape: ViewFeatureSet, m: int | None,
                     base_seed: int) -> ViewFeatureSet:
    if m is None or m >= shape.num_views:
        return shape
    return sample_views(shape, m, _eval_rng(base_seed, shape_id=shape.shape_id))


def evaluate(shapes: list[ViewFeatureSet], model: Model,
             views_per_shape: int | None = None, seed: int = 0,
             target: str = "label") -> AccuracyReport:
    """Instance accuracy plus unweighted per-class mean accuracy."""
    k = model.config.num_classes
    correct = np.zeros(k)
    total = np.zeros(k)
    for shape in shapes:
        truth = shape.label if target == "label" else shape.sublabel
        subset = eval_view_subset(shape, views_per_shape, seed)
        pred = model.predict(subset.features).predicted_class
        total[truth] += 1
        correct[truth] += pred == truth
    present = total > 0
    if not np.all(present):
        log.warning("%d classes have no evaluation items; excluded from the "
                    "class-accuracy mean", int((~present).sum()))
    per_class = np.full(k, np.nan)
    per_class[present] = correct[present] / total[present]
    instance = correct.sum() / total.sum() if total.sum() else 0.0
    class_acc = float(np.nanmean(per_class)) if present.any() else 0.0
    return AccuracyReport(instance_accuracy=float(instance),
                          class_accuracy=class_acc, per_class=per_class)


def train(dataset: Dataset, model: Model, cfg: TrainConfig,
          eval_split: str = "test", target: str = "label",
          progress=None) -> TrainResult:
    """Optimize the model; returns per-epoch log plus best/final states.

    `target` selects the label field ("label" or "sublabel") so the same
    loop trains both the category and the subcategory classifier.
    """
    cfg.validate()
    train_shapes = dataset.splits.get("train", [])
    eval_shapes = dataset.splits.get(eval_split, [])
    if not train_shapes:
        raise ValueError("training split is empty")
    k = model.config.num_classes
    for shape in train_shapes:
        truth = shape.label if target == "label" else shape.sublabel
        if truth is None or not 0 <= truth < k:
            raise ValueError(
                f"shape {shape.shape_id}: {target} {truth!r} outside [0, {k})")
    if cfg.views_per_shape is not None:
        short = [s for s in train_shapes + eval_shapes
                 if s.num_views < cfg.views_per_shape]
        if short:
            raise ValueError(
                f"views_per_shape={cfg.views_per_shape} exceeds stored views "
                f"of {short[0].shape_id} ({short[0].num_views})")

    optimizer = AdamW(model.trainable(cfg.freeze_adapter), cfg)
    records: list[EpochRecord] = []
    # best instance and best class accuracy are tracked independently;
    # the saved "best" state follows instance accuracy
    best_instance, best_class, best_epoch = -1.0, -1.0, -1
    best_state = model.clone_state()

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        rng = np.random.default_rng((cfg.seed + SEED_EPOCH) * 0x1_0000_0000 + epoch)
        order = rng.permutation(len(train_shapes))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train_shapes[i] for i in order[lo:lo + cfg.batch_size]]
            if cfg.views_per_shape is not None:
                batch = [sample_views(s, cfg.views_per_shape, rng) for s in batch]
            labels = [s.label if target == "label" else s.sublabel for s in batch]
            logits = model.forward_batch([s.features for s in batch],
                                         train=True, rng=rng)
            loss = ad.cross_entropy(logits, labels)
            value = loss.value[0, 0]
            if not math.isfinite(value):
                ids = ", ".join(s.shape_id for s in batch)
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch}, batch of [{ids}]")
            losses.append(value)
            model.zero_grads()
            ad.backward(loss)
            optimizer.step(lr)
        report = evaluate(eval_shapes, model, cfg.views_per_shape, cfg.seed,
                          target)
        rec = EpochRecord(epoch=epoch, lr=lr, train_loss=float(np.mean(losses)),
                          eval_instance=report.instance_accuracy,
                          eval_class=report.class_accuracy)
        records.append(rec)
        if report.instance_accuracy > best_instance:
            best_instance = report.instance_accuracy
            best_epoch = epoch
            best_state = model.clone_state()
        best_class = max(best_class, report.class_accuracy)
        if progress is not None:
            progress(rec)
    return TrainResult(log=records, best_instance=best_instance,
                       best_class=best_class, best_epoch=best_epoch,
                       best_state=best_state, final_state=model.clone_state())
