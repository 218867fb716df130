"""
Dataset readers: IDX image containers and labelled tabular CSV files.

The CSV contract is a header row, numeric feature columns, and one column
named ``label`` holding 0 (normal) or 1 (anomalous).
"""

from __future__ import annotations

import csv
import gzip
import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_MAX_IDX_BYTES = 1 << 32


class DataFormatError(ValueError):
    pass


def _open(path, mode="rb"):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def read_idx(path) -> np.ndarray:
    """Parse a big-endian IDX file of unsigned bytes (images or labels)."""
    with _open(path) as f:
        data = f.read()
    return parse_idx(data)


def parse_idx(data: bytes) -> np.ndarray:
    if len(data) < 4:
        raise DataFormatError("truncated IDX file: missing magic number at offset 0")
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise DataFormatError(f"bad IDX magic 0x{magic:08x} at offset 0")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataFormatError(f"truncated IDX header: expected {header} bytes, got {len(data)}")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_IDX_BYTES:
            raise DataFormatError(f"IDX dimensions {dims} overflow")
    if len(data) - header < count:
        raise DataFormatError(f"truncated IDX payload at offset {header}: expected {count} bytes, got {len(data) - header}")
    if len(data) - header > count:
        raise DataFormatError(f"IDX payload has {len(data) - header - count} trailing bytes")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims).copy()


def write_idx(path, array) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("IDX writer only supports uint8 arrays")
    if array.ndim == 3:
        magic = IDX_IMAGES_MAGIC
    elif array.ndim == 1:
        magic = IDX_LABELS_MAGIC
    else:
        raise ValueError("IDX arrays must be 1-D (labels) or 3-D (images)")
    payload = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    with _open(path, "wb") as f:
        f.write(payload)


@dataclass
class ImageDataset:
    images: np.ndarray  # (samples, H, W) uint8
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")


def load_image_dataset(images_path, labels_path) -> ImageDataset:
    return ImageDataset(read_idx(images_path), read_idx(labels_path))


def preprocess_images(images) -> np.ndarray:
    """Scale to [0, 1], 2x2 max-pool with stride 2, and flatten row-major."""
    images = np.asarray(images)
    if images.ndim == 2:
        return preprocess_images(images[None])[0]
    n, h, w = images.shape
    if h % 2 or w % 2:
        raise ValueError(f"max-pool needs even image dimensions, got {h}x{w}")
    x = images.astype(np.float64) / 255.0
    pooled = x.reshape(n, h // 2, 2, w // 2, 2).max(axis=(2, 4))
    return pooled.reshape(n, -1)


def preprocess_image(img) -> np.ndarray:
    img = np.asarray(img)
    if img.shape != (28, 28):
        raise ValueError(f"expected a 28x28 image, got shape {img.shape}")
    return preprocess_images(img[None])[0]


# --------------------------------------------------------------------------
# tabular

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray = field(default=None)

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        constant = std == 0.0
        if constant.any():
            log.warning("features %s have zero variance on the training split; left unscaled",
                        np.flatnonzero(constant).tolist())
        return cls(mean, np.where(constant, 1.0, std), constant)

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        centered = np.where(self.constant, X, X - self.mean)
        return centered / self.std

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["feature", "mean", "std", "constant"])
            for i, (m, s, c) in enumerate(zip(self.mean, self.std, self.constant)):
                w.writerow([i, repr(float(m)), repr(float(s)), int(c)])

    @classmethod
    def from_csv(cls, path) -> "Standardizer":
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        return cls(np.array([float(r["mean"]) for r in rows]),
                   np.array([float(r["std"]) for r in rows]),
                   np.array([bool(int(r["constant"])) for r in rows]))


@dataclass
class TabularDataset:
    features: np.ndarray  # (samples, N)
    labels: Optional[np.ndarray]  # 0 normal, 1 anomalous; None when unlabelled
    columns: list
    name: str = ""

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def anomaly_fraction(self) -> float:
        return float(np.mean(self.labels == 1))

    @property
    def normals(self) -> np.ndarray:
        return self.features[self.labels == 0]

    @property
    def anomalies(self) -> np.ndarray:
        return self.features[self.labels == 1]


def read_tabular_csv(path, label_column: str = "label", require_label: bool = True) -> TabularDataset:
    with _open(path, "rb") as f:
        try:
            text = f.read().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataFormatError(f"CSV file is not UTF-8 (byte offset {exc.start})") from None
    return parse_tabular_csv(text, label_column, name=Path(path).stem.split(".")[0], require_label=require_label)


def parse_tabular_csv(text: str, label_column: str = "label", name: str = "",
                      require_label: bool = True) -> TabularDataset:
    """Parse CSV text. Without ``require_label`` a missing label column yields ``labels=None``."""
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if not rows:
        raise DataFormatError("empty CSV file: no header row")
    header = [h.strip() for h in rows[0]]
    if label_column in header:
        li = header.index(label_column)
    elif require_label:
        raise DataFormatError(f"CSV header has no {label_column!r} column")
    else:
        li = -1
    body = rows[1:]
    if not body:
        raise DataFormatError("CSV file has a header but no data rows")
    feats = np.empty((len(body), len(header) - (li >= 0)))
    labels = np.empty(len(body), dtype=np.int64)
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataFormatError(f"row {r} has {len(row)} columns, header has {len(header)}")
        j = 0
        for c, cell in enumerate(row):
            try:
                value = float(cell)
            except ValueError:
                raise DataFormatError(f"non-numeric cell {cell!r} at row {r}, column {header[c]!r}") from None
            if not np.isfinite(value):
                raise DataFormatError(f"non-finite cell {cell!r} at row {r}, column {header[c]!r}")
            if c == li:
                if value not in (0.0, 1.0):
                    raise DataFormatError(f"label must be 0 or 1, got {cell!r} at row {r}")
                labels[r - 2] = int(value)
            else:
                feats[r - 2, j] = value
                j += 1
    columns = [h for i, h in enumerate(header) if i != li]
    ds = TabularDataset(feats, labels if li >= 0 else None, columns, name)
    if li < 0:
        return ds
    log.info("read %s: %d rows, %d features, %.1f%% anomalous",
             name or "dataset", len(labels), ds.n_features, 100 * ds.anomaly_fraction)
    return ds


def write_tabular_csv(path, features, labels, columns: Optional[list] = None) -> None:
    features = np.asarray(features, dtype=np.float64)
    columns = columns or [f"x{i}" for i in range(features.shape[1])]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(list(columns) + ["label"])
        for row, lab in zip(features, labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])
