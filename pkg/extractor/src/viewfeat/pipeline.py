"""Labels parsing, batched feature export, single-view fine-tuning.

The labels file is tab-separated, one shape per line:

    shape_id  label  subcategory-or-'-'  split  view_path [view_path ...]

View paths are relative to the image root. Shapes are processed in
shape-id order and views in sorted-path order, so exports are
reproducible; unreadable images are skipped with a warning and a shape
with no readable view left is dropped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .backbone import NORM_MEAN, NORM_STD, build_backbone
from .formats import ManifestRow, write_feature_file, write_manifest

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class ExtractorConfig:
    backbone: str = "resnet18"
    image_size: int = 224
    batch_size: int = 16
    seed: int = 0
    pretrained: bool = False
    epochs: int = 30        # fine-tuning budget
    lr: float = 0.01
    weights_path: str | None = None  # fine-tuned weights to load


@dataclass
class ShapeRecord:
    shape_id: str
    label_name: str
    sub_name: str | None
    split: str
    views: list[str]


@dataclass
class FinetuneResult:
    epoch_losses: list[float]
    train_accuracy: float
    state: dict = field(repr=False, default_factory=dict)


def read_labels_file(path) -> list[ShapeRecord]:
    records: list[ShapeRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 5:
                raise ValueError(
                    f"{path}:{lineno}: expected at least 5 tab-separated "
                    f"fields, got {len(parts)}")
            shape_id, label, sub, split = parts[:4]
            if split not in SPLITS:
                raise ValueError(f"{path}:{lineno}: unknown split {split!r}")
            if shape_id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate shape id {shape_id}")
            seen.add(shape_id)
            records.append(ShapeRecord(
                shape_id=shape_id, label_name=label,
                sub_name=None if sub == "-" else sub, split=split,
                views=sorted(p for p in parts[4:] if p)))
    if not records:
        raise ValueError(f"{path}: no shapes listed")
    with_sub = sum(r.sub_name is not None for r in records)
    if 0 < with_sub < len(records):
        raise ValueError(f"{path}: subcategory set for {with_sub} of "
                         f"{len(records)} shapes; must be all or none")
    return sorted(records, key=lambda r: r.shape_id)


def _label_indices(records: list[ShapeRecord]) -> tuple[dict[str, int],
                                                        dict[str, int] | None]:
    labels = {name: i for i, name in
              enumerate(sorted({r.label_name for r in records}))}
    subs = None
    if records[0].sub_name is not None:
        subs = {name: i for i, name in
                enumerate(sorted({r.sub_name for r in records}))}
    return labels, subs


def load_image(path, image_size: int) -> torch.Tensor:
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((image_size, image_size),
                                        Image.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - np.array(NORM_MEAN, dtype=np.float32)) \
        / np.array(NORM_STD, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1))


def _load_views(record: ShapeRecord, image_root: Path,
                image_size: int) -> list[torch.Tensor]:
    tensors = []
    for rel in record.views:
        path = image_root / rel
        try:
            tensors.append(load_image(path, image_size))
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable view %s of %s: %s",
                        rel, record.shape_id, exc)
    return tensors


def _prepare_model(cfg: ExtractorConfig) -> tuple[torch.nn.Module, int]:
    torch.set_num_threads(1)  # determinism across runs
    model, width = build_backbone(cfg.backbone, seed=cfg.seed,
                                  pretrained=cfg.pretrained)
    if cfg.weights_path:
        payload = torch.load(cfg.weights_path, map_location="cpu",
                             weights_only=True)
        model.load_state_dict(payload["backbone"])
        model.eval()
    return model, width


def extract(image_root, labels_path, features_out, manifest_out,
            cfg: ExtractorConfig, dataset_name: str = "views") -> int:
    """Export one penultimate-activation row per readable view.

    Returns the number of exported rows. Rows of one shape stay
    contiguous; the manifest records each shape's slice.
    """
    image_root = Path(image_root)
    records = read_labels_file(labels_path)
    labels, subs = _label_indices(records)
    model, width = _prepare_model(cfg)

    blocks: list[np.ndarray] = []
    manifest_rows: list[ManifestRow] = []
    cursor = 0
    with torch.no_grad():
        for record in records:
            tensors = _load_views(record, image_root, cfg.image_size)
            if not tensors:
                log.warning("shape %s has no readable views; dropped",
                            record.shape_id)
                continue
            feats = []
            for lo in range(0, len(tensors), cfg.batch_size):
                batch = torch.stack(tensors[lo:lo + cfg.batch_size])
                feats.append(model(batch).numpy().astype(np.float32))
            rows = np.vstack(feats)
            blocks.append(rows)
            manifest_rows.append(ManifestRow(
                shape_id=record.shape_id, label_name=record.label_name,
                label=labels[record.label_name],
                sublabel=None if subs is None else subs[record.sub_name],
                split=record.split, row_start=cursor,
                row_count=rows.shape[0]))
            cursor += rows.shape[0]
    if not blocks:
        raise ValueError("no shape produced any feature row")
    payload = np.vstack(blocks)
    write_feature_file(features_out, payload)
    write_manifest(manifest_out, manifest_rows, dim=width,
                   dataset_name=dataset_name,
                   view_size=f"{cfg.image_size}x{cfg.image_size}x3")
    return int(payload.shape[0])


def finetune(image_root, labels_path, cfg: ExtractorConfig,
             progress=None) -> FinetuneResult:
    """Single-view classification fine-tuning of the backbone.

    Plain SGD at `cfg.lr` with cosine decay over `cfg.epochs`; the loss
    is cross-entropy on individual views of the train split. With
    epochs=0 the weights are returned untouched.
    """
    image_root = Path(image_root)
    records = [r for r in read_labels_file(labels_path) if r.split == "train"]
    if not records:
        raise ValueError("no train-split shapes in the labels file")
    labels, _ = _label_indices(records)
    model, width = _prepare_model(cfg)

    images, targets = [], []
    for record in records:
        for tensor in _load_views(record, image_root, cfg.image_size):
            images.append(tensor)
            targets.append(labels[record.label_name])
    if not images:
        raise ValueError("no readable training views")
    data = torch.stack(images)
    target = torch.tensor(targets)

    torch.manual_seed(cfg.seed + 1)
    head = torch.nn.Linear(width, len(labels))
    losses: list[float] = []
    if cfg.epochs > 0:
        params = list(model.parameters()) + list(head.parameters())
        optimizer = torch.optim.SGD(params, lr=cfg.lr)
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            optimizer, T_max=cfg.epochs)
        model.train()
        generator = torch.Generator().manual_seed(cfg.seed + 2)
        for epoch in range(cfg.epochs):
            order = torch.randperm(len(images), generator=generator)
            epoch_loss = 0.0
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                optimizer.zero_grad()
                logits = head(model(data[idx]))
                loss = torch.nn.functional.cross_entropy(logits, target[idx])
                loss.backward()
                optimizer.step()
                epoch_loss += float(loss.detach()) * len(idx)
            scheduler.step()
            losses.append(epoch_loss / len(images))
            if progress is not None:
                progress(epoch, losses[-1])
        model.eval()

    with torch.no_grad():
        predicted = head(model(data)).argmax(dim=1)
        accuracy = float((predicted == target).float().mean())
    state = {"backbone": model.state_dict(), "head": head.state_dict(),
             "config": {"backbone": cfg.backbone, "image_size": cfg.image_size,
                        "classes": sorted(labels)}}
    return FinetuneResult(epoch_losses=losses, train_accuracy=accuracy,
                          state=state)
