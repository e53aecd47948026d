"""Writers for the downstream consumer's on-disk formats.

Implemented against the documented wire format rather than by importing
the consumer, so this package stays independent of it:

* feature file: magic ``VSF1``, uint32-LE rows, uint32-LE dim, then
  float32-LE row-major payload;
* manifest: ``#``-prefixed tab-separated header lines (``dim``,
  ``dataset``, optional ``views`` image size), then one tab-separated
  line per shape: shape_id, label name, label index, subcategory index
  or ``-``, split, row_start, row_count.

Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

FEATURE_MAGIC = b"VSF1"


@dataclass
class ManifestRow:
    shape_id: str
    label_name: str
    label: int
    sublabel: int | None
    split: str
    row_start: int
    row_count: int


def _atomic_write(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def feature_file_bytes(rows: np.ndarray) -> bytes:
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2:
        raise ValueError("feature payload must be 2-D")
    if not np.all(np.isfinite(rows)):
        raise ValueError("feature payload contains non-finite values")
    return (FEATURE_MAGIC + struct.pack("<II", rows.shape[0], rows.shape[1])
            + rows.tobytes(order="C"))


def write_feature_file(path, rows: np.ndarray) -> None:
    _atomic_write(path, feature_file_bytes(rows))


def manifest_text(rows: list[ManifestRow], dim: int, dataset_name: str,
                  view_size: str | None = None) -> str:
    lines = [f"# dim\t{dim}", f"# dataset\t{dataset_name}"]
    if view_size is not None:
        lines.append(f"# views\t{view_size}")
    for r in rows:
        sub = "-" if r.sublabel is None else str(r.sublabel)
        lines.append(f"{r.shape_id}\t{r.label_name}\t{r.label}\t{sub}\t"
                     f"{r.split}\t{r.row_start}\t{r.row_count}")
    return "\n".join(lines) + "\n"


def write_manifest(path, rows: list[ManifestRow], dim: int, dataset_name: str,
                   view_size: str | None = None) -> None:
    _atomic_write(path, manifest_text(rows, dim, dataset_name,
                                      view_size).encode("utf-8"))
