"""Datasets, packed containers and symmetric label-noise injection.

Datasets are held as parallel numpy arrays (ids, inputs, true labels,
observed labels) rather than lists of objects; ``LabeledSample`` views are
produced on indexing.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

PACKED_MAGIC = b"NLAB1"
FEATURE_MAGIC = b"NFEA1"


class DataError(ValueError):
    """Raised for malformed datasets or container files."""


class LabeledSample(NamedTuple):
    id: int
    input: np.ndarray
    true_label: int
    observed_label: int


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Immutable labeled dataset.

    ``inputs`` is either ``(n, H, W, C)`` float images in [0, 1] or ``(n, c)``
    cached feature vectors.
    """

    ids: np.ndarray
    inputs: np.ndarray
    true_labels: np.ndarray
    observed_labels: np.ndarray
    class_count: int
    split: str = "train"
    name: str = "dataset"

    def __post_init__(self):
        n = len(self.ids)
        if self.class_count < 2:
            raise DataError(f"class_count must be >= 2, got {self.class_count}")
        for arr_name in ("inputs", "true_labels", "observed_labels"):
            if len(getattr(self, arr_name)) != n:
                raise DataError(f"{arr_name} has {len(getattr(self, arr_name))} rows, expected {n}")
        if len(np.unique(self.ids)) != n:
            raise DataError("sample ids are not unique")
        for arr_name in ("true_labels", "observed_labels"):
            labels = getattr(self, arr_name)
            bad = np.flatnonzero((labels < 0) | (labels >= self.class_count))
            if bad.size:
                raise DataError(
                    f"label out of range: {arr_name}[{bad[0]}]={labels[bad[0]]} with k={self.class_count}"
                )
        if self.split not in ("train", "test"):
            raise DataError(f"split must be 'train' or 'test', got {self.split!r}")
        for arr in (self.ids, self.inputs, self.true_labels, self.observed_labels):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(
            int(self.ids[i]), self.inputs[i], int(self.true_labels[i]), int(self.observed_labels[i])
        )

    def __iter__(self) -> Iterator[LabeledSample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def samples(self) -> list[LabeledSample]:
        return list(self)

    @property
    def is_image(self) -> bool:
        return self.inputs.ndim == 4

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def with_observed(self, observed: np.ndarray) -> "LabeledDataset":
        return replace(self, observed_labels=np.asarray(observed, dtype=np.int64).copy())

    def subset(self, index: np.ndarray) -> "LabeledDataset":
        index = np.asarray(index)
        return replace(
            self,
            ids=self.ids[index].copy(),
            inputs=self.inputs[index].copy(),
            true_labels=self.true_labels[index].copy(),
            observed_labels=self.observed_labels[index].copy(),
        )

    def class_counts(self, observed: bool = True) -> np.ndarray:
        labels = self.observed_labels if observed else self.true_labels
        return np.bincount(labels, minlength=self.class_count)


def make_dataset(inputs, labels, class_count, observed=None, ids=None, split="train", name="dataset"):
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    return LabeledDataset(
        ids=np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64),
        inputs=np.ascontiguousarray(inputs, dtype=np.float32),
        true_labels=labels.copy(),
        observed_labels=labels.copy() if observed is None else np.asarray(observed, dtype=np.int64),
        class_count=int(class_count),
        split=split,
        name=name,
    )


def datasets_equal(a: LabeledDataset, b: LabeledDataset) -> bool:
    return (
        a.class_count == b.class_count
        and a.split == b.split
        and a.inputs.shape == b.inputs.shape
        and np.array_equal(a.ids, b.ids)
        and np.array_equal(a.inputs, b.inputs)
        and np.array_equal(a.true_labels, b.true_labels)
        and np.array_equal(a.observed_labels, b.observed_labels)
    )


# --------------------------------------------------------------------------
# Packed containers
# --------------------------------------------------------------------------


def save_packed(dataset: LabeledDataset, path) -> Path:
    """Write ``dataset`` as NLAB1 (images) or NFEA1 (feature vectors).

    Image pixels are quantized to u8 (``round(255 * x)``).
    """
    path = Path(path)
    n = len(dataset)
    labels = np.empty((n, 2), dtype="<u2")
    labels[:, 0] = dataset.true_labels
    labels[:, 1] = dataset.observed_labels
    with open(path, "wb") as f:
        if dataset.is_image:
            _, h, w, c = dataset.inputs.shape
            f.write(PACKED_MAGIC + struct.pack("<5I", dataset.class_count, n, h, w, c))
            pixels = np.clip(np.rint(dataset.inputs * 255.0), 0, 255).astype(np.uint8).reshape(n, -1)
            rec = np.dtype([("labels", "<u2", (2,)), ("pixels", "u1", (h * w * c,))])
            records = np.empty(n, dtype=rec)
            records["pixels"] = pixels
        elif dataset.inputs.ndim == 2:
            dim = dataset.inputs.shape[1]
            f.write(FEATURE_MAGIC + struct.pack("<3I", dataset.class_count, n, dim))
            rec = np.dtype([("labels", "<u2", (2,)), ("features", "<f4", (dim,))])
            records = np.empty(n, dtype=rec)
            records["features"] = dataset.inputs
        else:
            raise DataError(f"cannot pack inputs of shape {dataset.inputs.shape}")
        records["labels"] = labels
        f.write(records.tobytes())
    return path


def load_packed(path, split: str = "train", name: str | None = None) -> LabeledDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"packed file not found: {path}")
    raw = path.read_bytes()
    magic = raw[:5]
    if magic == PACKED_MAGIC:
        header_size = 5 + 5 * 4
        if len(raw) < header_size:
            raise DataError(f"{path}: truncated header at byte {len(raw)} (need {header_size})")
        k, n, h, w, c = struct.unpack_from("<5I", raw, 5)
        rec = np.dtype([("labels", "<u2", (2,)), ("pixels", "u1", (h * w * c,))])
    elif magic == FEATURE_MAGIC:
        header_size = 5 + 3 * 4
        if len(raw) < header_size:
            raise DataError(f"{path}: truncated header at byte {len(raw)} (need {header_size})")
        k, n, dim = struct.unpack_from("<3I", raw, 5)
        rec = np.dtype([("labels", "<u2", (2,)), ("features", "<f4", (dim,))])
    else:
        raise DataError(f"{path}: malformed header at byte 0: bad magic {magic!r}")
    if k < 2:
        raise DataError(f"{path}: malformed header at byte 5: class count k={k} < 2")

    expected = header_size + n * rec.itemsize
    if len(raw) < expected:
        complete = (len(raw) - header_size) // rec.itemsize
        raise DataError(
            f"{path}: truncated payload at byte {len(raw)}: expected {expected} bytes, "
            f"record {complete} of {n} incomplete"
        )
    if len(raw) > expected:
        raise DataError(f"{path}: {len(raw) - expected} trailing bytes after byte {expected}")
    records = np.frombuffer(raw, dtype=rec, count=n, offset=header_size)
    labels = records["labels"].astype(np.int64)
    bad = np.argwhere(labels >= k)
    if bad.size:
        i, col = bad[0]
        offset = header_size + i * rec.itemsize + 2 * col
        which = "true" if col == 0 else "observed"
        raise DataError(
            f"{path}: label out of range at record {i} (byte {offset}): {which} label {labels[i, col]} >= k={k}"
        )
    if magic == PACKED_MAGIC:
        inputs = records["pixels"].reshape(n, h, w, c).astype(np.float32) / 255.0
    else:
        inputs = records["features"].astype(np.float32)
    return LabeledDataset(
        ids=np.arange(n, dtype=np.int64),
        inputs=inputs,
        true_labels=labels[:, 0].copy(),
        observed_labels=labels[:, 1].copy(),
        class_count=int(k),
        split=split,
        name=name or path.stem,
    )


# --------------------------------------------------------------------------
# Image folders
# --------------------------------------------------------------------------


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an ``(H, W, C)`` float array to ``size=(H', W')``."""
    import torch
    import torch.nn.functional as F

    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def load_image_folder(
    root,
    manifest_path,
    input_size: tuple[int, int],
    class_count: int | None = None,
    channels: int = 3,
    split: str = "train",
    name: str | None = None,
) -> LabeledDataset:
    """Read images listed in a ``path,label`` manifest relative to ``root``."""
    from PIL import Image, UnidentifiedImageError

    root = Path(root)
    with open(manifest_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames[:2]] != ["path", "label"]:
            raise DataError(f"{manifest_path}: manifest header must be 'path,label'")
        rows = [(r["path"].strip(), r["label"].strip()) for r in reader]

    seen = set()
    images, labels = [], []
    mode = {1: "L", 3: "RGB"}[channels]
    for line, (rel, label) in enumerate(rows, start=2):
        if rel in seen:
            raise DataError(f"{manifest_path}:{line}: duplicate path {rel!r}")
        seen.add(rel)
        full = root / rel
        if not full.is_file():
            raise FileNotFoundError(f"{manifest_path}:{line}: missing image file {full}")
        try:
            with Image.open(full) as im:
                arr = np.asarray(im.convert(mode), dtype=np.float32) / 255.0
        except (UnidentifiedImageError, OSError) as exc:
            raise DataError(f"{manifest_path}:{line}: undecodable image {full}: {exc}") from exc
        if arr.ndim == 2:
            arr = arr[:, :, None]
        images.append(resize_bilinear(arr, input_size))
        try:
            labels.append(int(label))
        except ValueError:
            raise DataError(f"{manifest_path}:{line}: non-integer label {label!r}") from None

    labels = np.asarray(labels, dtype=np.int64)
    k = class_count if class_count is not None else int(labels.max()) + 1
    inputs = np.stack(images) if images else np.zeros((0, *input_size, channels), np.float32)
    return make_dataset(np.clip(inputs, 0.0, 1.0), labels, k, split=split, name=name or root.name)


# --------------------------------------------------------------------------
# Synthetic data
# --------------------------------------------------------------------------


def synthetic_centroids(k: int, dim: int, cluster_sep: float, rng: np.random.Generator) -> np.ndarray:
    """Centroids with pairwise distance exactly ``cluster_sep``.

    Uses scaled orthonormal directions (a regular simplex), so it needs
    ``dim >= k``.
    """
    if dim < k:
        raise DataError(f"synthetic data needs dim >= k (dim={dim}, k={k})")
    q, _ = np.linalg.qr(rng.standard_normal((dim, k)))
    return (cluster_sep / np.sqrt(2.0)) * q.T


def render_images(features: np.ndarray, image_shape: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Tile feature vectors into ``(H, W, C)`` images in [0, 1].

    Each feature vector is mapped through a fixed random projection to one
    patch-sized texture that is tiled across the image, then squashed with a
    logistic.
    """
    h, w, c = image_shape
    proj = rng.standard_normal((features.shape[1], h * w * c)) / np.sqrt(features.shape[1])
    flat = features @ proj
    return (1.0 / (1.0 + np.exp(-flat))).reshape(-1, h, w, c).astype(np.float32)


def make_synthetic(
    k: int,
    n_per_class: int,
    dim: int,
    cluster_sep: float,
    seed: int,
    image_shape: Sequence[int] | None = None,
    split: str = "train",
    name: str = "synthetic",
    layout_seed: int | None = None,
) -> LabeledDataset:
    """Gaussian clusters, one per class, with unit within-class variance.

    ``layout_seed`` (default ``seed``) fixes the centroids and image
    rendering, so train and test splits drawn with different ``seed`` values
    share one class geometry.
    """
    if k < 2:
        raise DataError(f"k must be >= 2, got {k}")
    if n_per_class <= 0:
        raise DataError(f"n_per_class must be positive, got {n_per_class}")
    if cluster_sep <= 0:
        raise DataError(f"cluster_sep must be positive, got {cluster_sep}")
    layout_rng = np.random.default_rng(seed if layout_seed is None else layout_seed)
    centroids = synthetic_centroids(k, dim, cluster_sep, layout_rng)
    rng = np.random.default_rng([seed, 1])
    labels = np.repeat(np.arange(k), n_per_class)
    features = centroids[labels] + rng.standard_normal((len(labels), dim))
    if image_shape is not None:
        inputs = render_images(features, image_shape, layout_rng)
    else:
        inputs = features.astype(np.float32)
    return make_dataset(inputs, labels, k, split=split, name=name)


# --------------------------------------------------------------------------
# Noise
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    rate: float
    seed: int = 0
    kind: str = "symmetric"

    def __post_init__(self):
        if self.kind != "symmetric":
            raise DataError(f"unsupported noise kind {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise DataError(f"noise rate must be in [0, 1], got {self.rate}")


@dataclass(frozen=True, eq=False)
class CorruptionMask:
    ids: np.ndarray
    flipped: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.flipped)

    @property
    def clean(self) -> np.ndarray:
        return ~self.flipped

    @property
    def rate(self) -> float:
        return float(self.flipped.mean()) if len(self.flipped) else 0.0

    @classmethod
    def from_dataset(cls, dataset: LabeledDataset) -> "CorruptionMask":
        return cls(dataset.ids.copy(), dataset.observed_labels != dataset.true_labels)

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            for i, flag in zip(self.ids, self.flipped):
                f.write(f"{int(i)},{int(flag)}\n")
        return path

    @classmethod
    def load(cls, path) -> "CorruptionMask":
        ids, flags = [], []
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    i, flag = line.split(",")
                    ids.append(int(i))
                    flags.append({"0": False, "1": True}[flag])
                except (ValueError, KeyError):
                    raise DataError(f"{path}:{line_no}: expected 'id,0|1', got {line!r}") from None
        return cls(np.asarray(ids, dtype=np.int64), np.asarray(flags, dtype=bool))


def inject_symmetric_noise(dataset: LabeledDataset, spec: NoiseSpec) -> tuple[LabeledDataset, CorruptionMask]:
    """Flip each label independently with probability ``spec.rate``.

    A flipped label is drawn uniformly from the ``k - 1`` other classes.
    Observed labels are regenerated from the true labels.
    """
    if dataset.split != "train":
        raise DataError(f"noise is injected into train splits only, got split={dataset.split!r}")
    k = dataset.class_count
    rng = np.random.default_rng(spec.seed)
    n = len(dataset)
    flipped = rng.random(n) < spec.rate
    # Offsets in [1, k-1] never map a label to itself.
    offsets = rng.integers(1, k, size=n)
    observed = np.where(flipped, (dataset.true_labels + offsets) % k, dataset.true_labels)
    noisy = dataset.with_observed(observed)
    return noisy, CorruptionMask(dataset.ids.copy(), flipped)


def batches(n: int, batch_size: int, shuffle_seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches for one epoch, a pure function of ``(seed, epoch)``."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if isinstance(n, LabeledDataset):
        n = len(n)
    perm = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]
