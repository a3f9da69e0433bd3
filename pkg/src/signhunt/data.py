"""Dataset ingestion (PNG directory or TF32 index) and synthetic desk-scale
datasets for training toy subjects."""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .tensors import ImageTensor, RngStream, load_png, load_tf32


@dataclass
class Dataset:
    """images: (S, C, H, W) float32 in [0, 1]; labels: (S,) int; ids: per-item names."""

    images: np.ndarray
    labels: np.ndarray
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ContractViolation(f"images must be (S, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ContractViolation("labels length does not match images")
        if not self.ids:
            self.ids = [f"item{i:04d}" for i in range(len(self.labels))]
        if len(self.ids) != len(self.labels):
            raise ContractViolation("ids length does not match images")

    def __len__(self):
        return self.images.shape[0]

    def item(self, i) -> ImageTensor:
        return ImageTensor(self.images[i])

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])


def load_dataset(path) -> Dataset:
    """Load PNGs + labels.csv, or TF32 tensors + index.json, from a directory."""
    path = Path(path)
    csv_path = path / "labels.csv"
    index_path = path / "index.json"
    images, labels, ids = [], [], []
    if csv_path.exists():
        with open(csv_path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].startswith("#") or row[0] == "filename":
                    continue
                fname, label = row[0].strip(), int(row[1])
                images.append(load_png(path / fname).data)
                labels.append(label)
                ids.append(Path(fname).stem)
    elif index_path.exists():
        index = json.loads(index_path.read_text())
        for entry in index["items"]:
            images.append(load_tf32(path / entry["tensor"]).data)
            labels.append(int(entry["label"]))
            ids.append(entry.get("id", Path(entry["tensor"]).stem))
    else:
        raise ContractViolation(f"no labels.csv or index.json under {path}")
    if not images:
        return Dataset(np.zeros((0, 1, 1, 1), dtype=np.float32), np.zeros(0, dtype=np.int64), [])
    return Dataset(np.stack(images), np.asarray(labels), ids)


def blob_dataset(n_classes, n_features, n_per_class, spread=0.08, rng: RngStream = None):
    """Gaussian-ish blobs in [0,1]^n_features, one well-separated center per
    class; images shaped (1, 1, n_features)."""
    if rng is None:
        raise ContractViolation("blob_dataset requires an RngStream")
    centers = rng.uniform(n_classes * n_features).reshape(n_classes, n_features)
    centers = 0.2 + 0.6 * centers
    images, labels = [], []
    for c in range(n_classes):
        noise = (rng.uniform(n_per_class * n_features).reshape(n_per_class, n_features) - 0.5)
        pts = np.clip(centers[c] + spread * 2.0 * noise, 0.0, 1.0)
        images.append(pts.reshape(n_per_class, 1, 1, n_features))
        labels.extend([c] * n_per_class)
    return Dataset(np.concatenate(images).astype(np.float32), np.asarray(labels))


def pattern_dataset(n_classes, shape=(1, 8, 8), n_per_class=40, noise=0.08,
                    rng: RngStream = None):
    """Per-class smooth prototype patterns plus pixel noise; separable by
    construction at small noise."""
    if rng is None:
        raise ContractViolation("pattern_dataset requires an RngStream")
    c, h, w = shape
    m = c * h * w
    prototypes = 0.25 + 0.5 * rng.uniform(n_classes * m).reshape(n_classes, c, h, w)
    images, labels = [], []
    for cls in range(n_classes):
        jitter = rng.uniform(n_per_class * m).reshape(n_per_class, c, h, w) - 0.5
        samples = np.clip(prototypes[cls] + noise * 2.0 * jitter, 0.0, 1.0)
        images.append(samples)
        labels.extend([cls] * n_per_class)
    return Dataset(np.concatenate(images).astype(np.float32), np.asarray(labels))


def save_dataset_tf32(dataset: Dataset, path):
    """Write a dataset as TF32 tensors plus index.json."""
    from .tensors import save_tf32

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    items = []
    for i in range(len(dataset)):
        name = f"{dataset.ids[i]}.json"
        save_tf32(dataset.item(i), path / name)
        items.append({"tensor": name, "label": int(dataset.labels[i]), "id": dataset.ids[i]})
    (path / "index.json").write_text(json.dumps({"items": items}, indent=2) + "\n")
    return path
