"""Source/target image datasets and non-IID client partitioning."""

from __future__ import annotations

import csv
import gzip
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from fedgca.streams import SeedKey, make_rng

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    """Raised for malformed or inconsistent dataset inputs."""


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Images in ``(count, channels, height, width)`` layout with values in [0, 1]."""

    images: np.ndarray
    labels: np.ndarray
    domain_tag: str
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"{self.domain_tag}: images must be rank 4, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(
                f"{self.domain_tag}: {len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DatasetError(f"{self.domain_tag}: labels outside [0, {self.class_count})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DatasetError(f"{self.domain_tag}: pixel values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.domain_tag, self.class_count)


@dataclass
class PartitionPlan:
    assignments: list[list[int]]
    dirichlet_concentration: float
    seed: int

    @property
    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "concentration": self.dirichlet_concentration,
                "assignments": self.assignments,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        doc = json.loads(text)
        return cls([list(map(int, a)) for a in doc["assignments"]], float(doc["concentration"]), int(doc["seed"]))


# --------------------------------------------------------------------------- IDX

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into an array."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read IDX file ({exc})") from exc
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_DTYPES:
        raise DatasetError(f"{path}: bad IDX magic number {raw[:4].hex()}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if ndim == 0 or len(raw) < header:
        raise DatasetError(f"{path}: truncated IDX header")
    dims = [int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    dtype = np.dtype(_IDX_DTYPES[raw[2]])
    expected = math.prod(dims) * dtype.itemsize
    if len(raw) - header < expected:
        raise DatasetError(f"{path}: truncated IDX payload ({len(raw) - header} of {expected} bytes)")
    return np.frombuffer(raw, dtype=dtype, count=math.prod(dims), offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, array.ndim]))
        for d in array.shape:
            fh.write(int(d).to_bytes(4, "big"))
        fh.write(array.tobytes())


def load_idx_dataset(images_path, labels_path, domain_tag: str, class_count: int = 10) -> LabeledDataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim not in (3, 4):
        raise DatasetError(f"{images_path}: expected rank 3 or 4 image array, got rank {images.ndim}")
    if labels.ndim != 1:
        raise DatasetError(f"{labels_path}: expected rank 1 label array, got rank {labels.ndim}")
    if len(images) != len(labels):
        raise DatasetError(
            f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels"
        )
    if images.ndim == 3:
        images = images[:, None]
    if len(labels) and labels.max() >= class_count:
        raise DatasetError(f"{labels_path}: label {int(labels.max())} outside [0, {class_count})")
    return LabeledDataset(
        images.astype(np.float32) / 255.0, labels.astype(np.int64), domain_tag, class_count
    )


# --------------------------------------------------------------------- directory


def _to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)


def resize_images(images: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Bilinear resize plus channel conformance (grayscale is replicated)."""
    channels, height, width = shape
    out = images
    if out.shape[2:] != (height, width):
        t = torch.from_numpy(np.ascontiguousarray(out, dtype=np.float32))
        out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False).numpy()
    if out.shape[1] != channels:
        if out.shape[1] == 1:
            out = np.repeat(out, channels, axis=1)
        elif channels == 1:
            out = out.mean(axis=1, keepdims=True)
        else:
            raise DatasetError(f"cannot map {out.shape[1]} channels to {channels}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def conform(dataset: LabeledDataset, shape: Sequence[int]) -> LabeledDataset:
    if dataset.shape == tuple(shape):
        return dataset
    return LabeledDataset(resize_images(dataset.images, shape), dataset.labels, dataset.domain_tag, dataset.class_count)


def load_directory_dataset(
    root, domain_tag: str, shape: Sequence[int] = (3, 28, 28), class_count: int = 10
) -> LabeledDataset:
    root = Path(root)
    manifest = root / "labels.csv"
    if not manifest.is_file():
        raise DatasetError(f"{manifest}: missing manifest")
    channels = shape[0]
    images, labels = [], []
    with open(manifest, newline="") as fh:
        for rowno, row in enumerate(csv.DictReader(fh), start=2):
            img_path = root / row["path"]
            try:
                label = int(row["label"])
            except (TypeError, ValueError) as exc:
                raise DatasetError(f"{manifest} row {rowno}: bad label {row.get('label')!r}") from exc
            if not 0 <= label < class_count:
                raise DatasetError(f"{manifest} row {rowno}: label {label} outside [0, {class_count})")
            try:
                with Image.open(img_path) as im:
                    im = im.convert("L" if channels == 1 else "RGB")
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except (OSError, ValueError) as exc:
                raise DatasetError(f"{manifest} row {rowno}: cannot decode {img_path} ({exc})") from exc
            arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
            images.append(resize_images(arr[None], shape)[0])
            labels.append(label)
    if not images:
        return LabeledDataset(np.zeros((0, *shape), np.float32), np.zeros(0, np.int64), domain_tag, class_count)
    return LabeledDataset(np.stack(images), np.asarray(labels, dtype=np.int64), domain_tag, class_count)


def save_directory_dataset(dataset: LabeledDataset, root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    pixels = _to_uint8(dataset.images)
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label"])
        for i, (img, label) in enumerate(zip(pixels, dataset.labels)):
            rel = f"images/{i:06d}.png"
            data = img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)
            Image.fromarray(data).save(root / rel)
            writer.writerow([rel, int(label)])
    return root


# ------------------------------------------------------------------- synthetic


def synth_colorshift_domain(base: LabeledDataset, seed: int) -> LabeledDataset:
    """Per-image random affine colouring of a grayscale dataset.

    Channel ``c`` of image ``i`` is ``clip(a * x + b, 0, 1)`` with
    ``a ~ U[0.4, 1.0]`` and ``b ~ U[0, 0.6]`` drawn from stream ``(seed, i, c)``.
    """
    if base.images.shape[1] != 1:
        raise DatasetError(f"{base.domain_tag}: colour shift needs grayscale input, got {base.images.shape[1]} channels")
    n = len(base)
    coef = np.empty((n, 3, 2))
    for i in range(n):
        for c in range(3):
            rng = make_rng((seed, i, c))
            coef[i, c, 0] = rng.uniform(0.4, 1.0)
            coef[i, c, 1] = rng.uniform(0.0, 0.6)
    x = base.images.astype(np.float64)
    out = np.clip(coef[:, :, 0, None, None] * x + coef[:, :, 1, None, None], 0.0, 1.0)
    return LabeledDataset(out.astype(np.float32), base.labels.copy(), f"colorshift({base.domain_tag})", base.class_count)


def sklearn_digits(domain_tag: str = "digits") -> LabeledDataset:
    """The 1797-image 8x8 handwritten digits set bundled with scikit-learn."""
    from sklearn.datasets import load_digits

    bunch = load_digits()
    images = (bunch.images / 16.0).astype(np.float32)[:, None]
    return LabeledDataset(images, bunch.target.astype(np.int64), domain_tag, 10)


# ------------------------------------------------------------------ partition


def _largest_remainder(q: np.ndarray, n: int) -> np.ndarray:
    raw = q * n
    counts = np.floor(raw).astype(np.int64)
    short = n - int(counts.sum())
    if short > 0:
        # stable sort: ties go to the lower client id
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_dirichlet(dataset: LabeledDataset, K: int, concentration: float, seed: int) -> PartitionPlan:
    """Per-class Dirichlet split of ``dataset`` across ``K`` clients.

    Class ``c`` draws ``q ~ Dir(concentration * 1_K)`` then a permutation of its
    indices, both from stream ``(seed, c)``, and hands out consecutive runs of
    the permutation by largest-remainder rounding of ``q * n_c``. Empty clients
    are repaired by taking the highest index of the largest shard.
    """
    n = len(dataset)
    if K < 1:
        raise ValueError("K must be >= 1")
    if K > n:
        raise DatasetError(f"cannot split {n} samples across {K} clients")
    if concentration <= 0:
        raise ValueError("concentration must be positive")
    shards: list[list[int]] = [[] for _ in range(K)]
    labels = dataset.labels
    for c in range(dataset.class_count):
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            continue
        rng = make_rng((seed, c))
        q = rng.dirichlet(np.full(K, float(concentration)))
        perm = rng.permutation(idx)
        counts = _largest_remainder(q, len(idx))
        start = 0
        for k in range(K):
            shards[k].extend(perm[start : start + counts[k]].tolist())
            start += counts[k]
    shards = [sorted(s) for s in shards]
    for k in range(K):
        if not shards[k]:
            donor = max(range(K), key=lambda j: (len(shards[j]), -j))
            shards[k].append(shards[donor].pop())
    return PartitionPlan(shards, float(concentration), int(seed))


def label_entropy(dataset: LabeledDataset, indices: Sequence[int]) -> float:
    counts = np.bincount(dataset.labels[np.asarray(indices, dtype=np.int64)], minlength=dataset.class_count)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def data_dir() -> Path:
    return Path(os.environ.get("FEDGCA_DATA_DIR", "data"))


def content_hash(dataset: LabeledDataset) -> str:
    """Git-style blob hash over the uint8 pixels and labels."""
    payload = _to_uint8(dataset.images).tobytes() + dataset.labels.astype("<i8").tobytes()
    h = hashlib.sha1(f"blob {len(payload)}\0".encode())
    h.update(payload)
    return h.hexdigest()
