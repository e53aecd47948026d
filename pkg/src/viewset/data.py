"""Dataset containers, binary feature files, manifests, checkpoints.

On-disk layout:

* Feature file: magic ``VSF1``, uint32-LE row count, uint32-LE feature
  width, then ``rows * dim`` float32-LE values in row-major order. Disk
  payloads are 32-bit for compactness; everything is widened to float64
  on load.
* Manifest: tab-separated text, one shape per line, with ``#``-prefixed
  header lines carrying the feature width, dataset name and (optionally)
  the source view image size. Missing subcategories are written as ``-``.
* Checkpoint: magic ``VSC1``, uint32-LE JSON header length, a JSON blob
  echoing the model config plus array shapes, then raw float64-LE
  payloads. Round-trips are bit-identical.
"""

from __future__ import annotations

import itertools
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig

FEATURE_MAGIC = b"VSF1"
CHECKPOINT_MAGIC = b"VSC1"
SPLITS = ("train", "val", "test")


class DataFormatError(Exception):
    """A file failed structural validation; message names the location."""


@dataclass
class ViewFeatureSet:
    """One shape: an unordered bundle of per-view feature rows."""
    shape_id: str
    features: np.ndarray  # M x dim, float64
    label: int
    sublabel: int | None = None

    @property
    def num_views(self) -> int:
        return self.features.shape[0]


@dataclass
class Dataset:
    splits: dict[str, list[ViewFeatureSet]]
    dim: int
    label_names: list[str]
    name: str = "dataset"
    view_size: str | None = None

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    @property
    def has_subcategories(self) -> bool:
        shapes = self.all_shapes()
        return bool(shapes) and all(s.sublabel is not None for s in shapes)

    @property
    def num_subclasses(self) -> int:
        if not self.has_subcategories:
            return 0
        return max(s.sublabel for s in self.all_shapes()) + 1

    def all_shapes(self) -> list[ViewFeatureSet]:
        out = []
        for split in SPLITS:
            out.extend(self.splits.get(split, []))
        return out


# ---------------------------------------------------------------- features

def write_feature_file(path, rows: np.ndarray) -> None:
    rows = np.ascontiguousarray(rows, dtype=np.float32)
    if rows.ndim != 2:
        raise ValueError("feature payload must be 2-D")
    if not np.all(np.isfinite(rows)):
        raise ValueError("feature payload contains non-finite values")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", rows.shape[0], rows.shape[1]))
        fh.write(rows.tobytes(order="C"))


def read_feature_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FEATURE_MAGIC:
        raise DataFormatError(f"{path}: bad magic {blob[:4]!r}, expected {FEATURE_MAGIC!r}")
    if len(blob) < 12:
        raise DataFormatError(f"{path}: truncated header ({len(blob)} bytes)")
    rows, dim = struct.unpack("<II", blob[4:12])
    expected = 12 + 4 * rows * dim
    if len(blob) != expected:
        raise DataFormatError(
            f"{path}: size mismatch, expected {expected} bytes for "
            f"{rows}x{dim} payload, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=12).reshape(rows, dim)
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.isfinite(data))[0])
        raise DataFormatError(
            f"{path}: non-finite value at row {bad // dim}, col {bad % dim}")
    return data.astype(np.float64)


# ---------------------------------------------------------------- manifest

@dataclass
class ManifestEntry:
    shape_id: str
    label_name: str
    label: int
    sublabel: int | None
    split: str
    row_start: int
    row_count: int


def write_manifest(path, entries: list[ManifestEntry], dim: int,
                   dataset_name: str, view_size: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# dim\t{dim}\n")
        fh.write(f"# dataset\t{dataset_name}\n")
        if view_size is not None:
            fh.write(f"# views\t{view_size}\n")
        for e in entries:
            sub = "-" if e.sublabel is None else str(e.sublabel)
            fh.write(f"{e.shape_id}\t{e.label_name}\t{e.label}\t{sub}\t"
                     f"{e.split}\t{e.row_start}\t{e.row_count}\n")


def read_manifest(path) -> tuple[list[ManifestEntry], dict]:
    header: dict[str, str] = {}
    entries: list[ManifestEntry] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                parts = line[1:].strip().split("\t")
                if len(parts) == 2:
                    header[parts[0].strip()] = parts[1].strip()
                continue
            parts = line.split("\t")
            if len(parts) != 7:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 7 tab-separated fields, got {len(parts)}")
            shape_id, label_name, label, sub, split, start, count = parts
            if split not in SPLITS:
                raise DataFormatError(f"{path}:{lineno}: unknown split {split!r}")
            try:
                entry = ManifestEntry(
                    shape_id=shape_id, label_name=label_name, label=int(label),
                    sublabel=None if sub == "-" else int(sub), split=split,
                    row_start=int(start), row_count=int(count))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if entry.row_count < 1:
                raise DataFormatError(f"{path}:{lineno}: row_count must be >= 1")
            if entry.label < 0:
                raise DataFormatError(f"{path}:{lineno}: negative label index")
            entries.append(entry)
    if "dim" not in header:
        raise DataFormatError(f"{path}: missing '# dim' header line")
    try:
        header["dim"] = int(header["dim"])
    except ValueError:
        raise DataFormatError(f"{path}: non-integer dim header") from None
    return entries, header


def _validate_ranges(entries: list[ManifestEntry], num_rows: int, path) -> None:
    spans = sorted((e.row_start, e.row_start + e.row_count, e.shape_id)
                   for e in entries)
    prev_end, prev_id = 0, None
    for start, end, shape_id in spans:
        if start < 0 or end > num_rows:
            raise DataFormatError(
                f"{path}: rows [{start}, {end}) of {shape_id} outside "
                f"feature file with {num_rows} rows")
        if start < prev_end:
            raise DataFormatError(
                f"{path}: rows of {shape_id} overlap rows of {prev_id}")
        prev_end, prev_id = end, shape_id


def load_dataset(feature_path, manifest_path) -> Dataset:
    features = read_feature_file(feature_path)
    entries, header = read_manifest(manifest_path)
    if header["dim"] != features.shape[1]:
        raise DataFormatError(
            f"{manifest_path}: dim {header['dim']} does not match feature "
            f"file width {features.shape[1]}")
    _validate_ranges(entries, features.shape[0], manifest_path)

    seen_ids = set()
    names: dict[int, str] = {}
    for e in entries:
        if e.shape_id in seen_ids:
            raise DataFormatError(f"{manifest_path}: duplicate shape id {e.shape_id}")
        seen_ids.add(e.shape_id)
        if names.setdefault(e.label, e.label_name) != e.label_name:
            raise DataFormatError(
                f"{manifest_path}: label index {e.label} maps to both "
                f"{names[e.label]!r} and {e.label_name!r}")

    with_sub = sum(e.sublabel is not None for e in entries)
    if 0 < with_sub < len(entries):
        raise DataFormatError(
            f"{manifest_path}: subcategory set for {with_sub} of "
            f"{len(entries)} shapes; must be all or none")

    num_classes = max(names) + 1
    label_names = [names.get(i, f"class{i:02d}") for i in range(num_classes)]
    splits: dict[str, list[ViewFeatureSet]] = {s: [] for s in SPLITS}
    for e in entries:
        rows = features[e.row_start:e.row_start + e.row_count]
        splits[e.split].append(ViewFeatureSet(
            shape_id=e.shape_id, features=rows.copy(), label=e.label,
            sublabel=e.sublabel))
    return Dataset(splits=splits, dim=features.shape[1], label_names=label_names,
                   name=str(header.get("dataset", "dataset")),
                   view_size=header.get("views"))


def save_dataset(dataset: Dataset, feature_path, manifest_path) -> None:
    """Write features + manifest; disk payload is quantized to float32."""
    blocks, entries = [], []
    cursor = 0
    for split in SPLITS:
        for shape in dataset.splits.get(split, []):
            m = shape.num_views
            blocks.append(shape.features)
            entries.append(ManifestEntry(
                shape_id=shape.shape_id,
                label_name=dataset.label_names[shape.label],
                label=shape.label, sublabel=shape.sublabel, split=split,
                row_start=cursor, row_count=m))
            cursor += m
    payload = np.vstack(blocks) if blocks else np.zeros((0, dataset.dim))
    write_feature_file(feature_path, payload)
    write_manifest(manifest_path, entries, dataset.dim, dataset.name,
                   dataset.view_size)


# -------------------------------------------------------------- checkpoint

def save_checkpoint(path, config: ModelConfig, params: dict[str, np.ndarray],
                    buffers: dict[str, np.ndarray], meta: dict | None = None) -> None:
    arrays = [{"name": k, "rows": int(v.shape[0]), "cols": int(v.shape[1]),
               "kind": "param"} for k, v in params.items()]
    arrays += [{"name": k, "rows": int(v.shape[0]), "cols": int(v.shape[1]),
                "kind": "buffer"} for k, v in buffers.items()]
    head = {"format": 1, "config": config.to_dict(), "meta": meta or {},
            "arrays": arrays}
    blob = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for k, v in params.items():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes(order="C"))
        for k, v in buffers.items():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes(order="C"))


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray],
                                   dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (head_len,) = struct.unpack("<I", blob[4:8])
    head = json.loads(blob[8:8 + head_len].decode("utf-8"))
    config = ModelConfig.from_dict(head["config"])
    offset = 8 + head_len
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for entry in head["arrays"]:
        rows, cols = entry["rows"], entry["cols"]
        nbytes = 8 * rows * cols
        if offset + nbytes > len(blob):
            raise DataFormatError(
                f"{path}: truncated payload for array {entry['name']!r}")
        arr = np.frombuffer(blob, dtype="<f8", offset=offset,
                            count=rows * cols).reshape(rows, cols).copy()
        offset += nbytes
        target = params if entry["kind"] == "param" else buffers
        target[entry["name"]] = arr
    if offset != len(blob):
        raise DataFormatError(
            f"{path}: {len(blob) - offset} trailing bytes after payload")
    return config, params, buffers, head.get("meta", {})


# ---------------------------------------------------------------- synthetic

def _balanced_codes(views: int, num_classes: int) -> list[tuple[int, ...]]:
    """Distinct on/off codes with equal popcount, taken in complement pairs.

    Complement pairing guarantees every slot sees both variants at least
    twice once four or more codes are in play, so every aspect is shared
    between classes.
    """
    half = views // 2
    codes: list[tuple[int, ...]] = []
    seen: set[tuple[int, ...]] = set()
    for bits in itertools.combinations(range(views), half):
        code = tuple(1 if i in bits else 0 for i in range(views))
        if code in seen:
            continue
        comp = tuple(1 - b for b in code)
        seen.add(code)
        seen.add(comp)
        codes.append(code)
        if comp != code:
            codes.append(comp)
        if len(codes) >= num_classes:
            break
    return codes[:num_classes]


# layout of the synthetic task along its signal axis, in feature units
# (noise defaults to 0.1, so the on/off shift sits 6 sigma per view and
# the anchors clear the outermost shifted slot by 9 sigma)
ANCHOR_POS = 6.5
SLOT_SPREAD = 5.0
SHIFT = 0.6


def generate_synthetic(num_classes: int = 10, shapes_per_class: int = 50,
                       views: int = 8, dim: int = 32, noise: float = 0.1,
                       seed: int = 0, train_fraction: float = 0.8) -> Dataset:
    """Multi-view toy task that genuinely requires aggregating views.

    All aspects of every class sit on one random axis. Two shared anchor
    aspects mark its far ends; between them lie per-slot aspects that a
    balanced class code nudges up or down the axis. Because the codes are
    balanced the nudges cancel in the set mean, and because the anchors
    dominate the extremes, column-max statistics of any per-view linear
    map are class-independent too: a model that only pools per-view
    projections is blind here. The multiset of nudged slots still
    identifies the class uniquely, every single aspect is shared between
    classes (anchors by everyone, slot variants via complement codes), so
    only aggregating several views can decide. A shape is its class's
    aspects in random order plus isotropic noise.
    """
    if num_classes < 2:
        raise ValueError("synthetic task needs at least 2 classes to share aspects")
    coding = views - 2  # two views are anchors
    max_classes = math.comb(coding, coding // 2) if coding >= 2 else 0
    if views < 6 or views % 2 or num_classes < 4 or num_classes > max_classes:
        raise ValueError(
            f"infeasible sharing constraint: balanced codes over views-2 "
            f"slots need an even views >= 6 and 4 <= num_classes <= "
            f"C(views-2, (views-2)/2); got views={views}, "
            f"num_classes={num_classes}")
    codes = _balanced_codes(coding, num_classes)
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=dim)
    axis /= np.linalg.norm(axis)
    slot_pos = np.linspace(-SLOT_SPREAD, SLOT_SPREAD, coding)
    n_train = max(1, min(shapes_per_class - 1,
                         math.ceil(train_fraction * shapes_per_class)))
    splits: dict[str, list[ViewFeatureSet]] = {s: [] for s in SPLITS}
    idx = 0
    for c, code in enumerate(codes):
        positions = np.concatenate(
            [[-ANCHOR_POS, ANCHOR_POS],
             slot_pos + (2 * np.asarray(code) - 1) * SHIFT])
        aspects = np.outer(positions, axis)
        for s in range(shapes_per_class):
            order = rng.permutation(views)
            rows = aspects[order] + rng.normal(scale=noise, size=(views, dim))
            split = "train" if s < n_train else "test"
            splits[split].append(ViewFeatureSet(
                shape_id=f"shape{idx:05d}", features=rows, label=c, sublabel=c))
            idx += 1
    return Dataset(splits=splits, dim=dim,
                   label_names=[f"class{c:02d}" for c in range(num_classes)],
                   name="synthetic")
