"""Datasets, non-IID partitioning across devices, and their on-disk forms."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    features: np.ndarray  # [N, C, H, W] float64
    labels: np.ndarray  # [N] int64
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 4:
            raise ValueError(f"features must be [N, C, H, W], got shape {self.features.shape}")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.features.shape[1:])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


# -- synthetic generator -----------------------------------------------------


def _templates(num_classes: int, shape, rng: np.random.Generator) -> np.ndarray:
    """One template per class: a Gaussian blob plus an oriented sinusoid."""
    c, h, w = shape
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    out = np.empty((num_classes, c, h, w))
    for k in range(num_classes):
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        width = rng.uniform(0.12, 0.25)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        theta = np.pi * k / num_classes
        freq = 1.0 + (k % 3)
        for ch in range(c):
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
            out[k, ch] = blob + 0.5 * wave
    return out


def nearest_template_accuracy(ds: Dataset, templates: np.ndarray) -> float:
    flat = ds.features.reshape(len(ds), -1)
    t = templates.reshape(templates.shape[0], -1)
    d = ((flat[:, None, :] - t[None]) ** 2).sum(-1)
    return float(np.mean(np.argmin(d, axis=1) == ds.labels))


def gen_synthetic(num_classes: int, per_class: int, shape=(1, 8, 8), difficulty: float = 0.5,
                  seed: int = 0, return_templates: bool = False):
    """Class templates plus noise with standard deviation ``difficulty``.

    Samples are ordered class by class. Values are rounded to float32 so the
    cache file round-trips exactly.
    """
    c, h, w = shape
    if h < 8 or w < 8:
        raise ValueError(f"images must be at least 8x8, got {h}x{w}")
    if per_class < 1 or num_classes < 2:
        raise ValueError("need per_class >= 1 and num_classes >= 2")
    if difficulty < 0:
        raise ValueError("difficulty must be non-negative")
    rng = np.random.default_rng(seed)
    templates = _templates(num_classes, shape, rng)
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.normal(size=(labels.size, c, h, w))
    # small per-sample brightness jitter, also scaled by difficulty
    gain = 1.0 + 0.2 * difficulty * rng.normal(size=(labels.size, 1, 1, 1))
    x = (templates[labels] * gain + difficulty * noise).astype(np.float32).astype(np.float64)
    ds = Dataset(x, labels, num_classes)
    return (ds, templates) if return_templates else ds


# -- dataset cache -----------------------------------------------------------

CACHE_MAGIC = b"FDDS"
CACHE_VERSION = 1


def save_dataset(ds: Dataset, path) -> None:
    n, c, h, w = ds.features.shape
    f32 = ds.features.astype("<f4")
    if not np.array_equal(f32.astype(np.float64), ds.features):
        raise ValueError("features are not exactly representable as 32-bit floats")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<6I", CACHE_VERSION, n, c, h, w, ds.num_classes))
        fh.write(f32.tobytes())
        fh.write(ds.labels.astype("<i4").tobytes())


def load_dataset(path) -> Dataset:
    blob = Path(path).read_bytes()
    if blob[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 28:
        raise ValueError(f"{path}: truncated header at byte {len(blob)}")
    version, n, c, h, w, k = struct.unpack_from("<6I", blob, 4)
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    need = 28 + 4 * n * c * h * w + 4 * n
    if len(blob) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(blob)}")
    feats = np.frombuffer(blob, "<f4", n * c * h * w, 28).reshape(n, c, h, w)
    labels = np.frombuffer(blob, "<i4", n, 28 + 4 * n * c * h * w)
    return Dataset(feats.astype(np.float64), labels.astype(np.int64), k)


# -- raw IDX images ----------------------------------------------------------


def _read_idx(path, expect_ndim: int) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise ValueError(f"{path}: truncated at byte {len(blob)} (no magic number)")
    zero, dtype, ndim = struct.unpack_from(">HBB", blob, 0)
    if zero != 0 or dtype != 0x08 or ndim != expect_ndim:
        raise ValueError(f"{path}: bad magic number 0x{blob[:4].hex()} at byte 0")
    hdr = 4 + 4 * ndim
    if len(blob) < hdr:
        raise ValueError(f"{path}: truncated header at byte {len(blob)}")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    size = int(np.prod(dims))
    if len(blob) < hdr + size:
        raise ValueError(f"{path}: truncated data at byte {len(blob)}, expected {hdr + size}")
    return np.frombuffer(blob, np.uint8, size, hdr).reshape(dims)


def load_raw_images(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read a magic-number image/label file pair (unsigned bytes), scaled to [0, 1]."""
    imgs = _read_idx(images_path, 3)
    labels = _read_idx(labels_path, 1)
    if imgs.shape[0] != labels.shape[0]:
        raise ValueError(f"{labels_path}: {labels.shape[0]} labels for {imgs.shape[0]} images (count at byte 4)")
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    return Dataset(imgs[:, None].astype(np.float64) / 255.0, labels.astype(np.int64), k)


def save_raw_images(ds: Dataset, images_path, labels_path) -> None:
    if ds.features.shape[1] != 1:
        raise ValueError("raw image files hold single-channel images")
    n, _, h, w = ds.features.shape
    pix = np.clip(np.rint(ds.features[:, 0] * 255.0), 0, 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">HBB3I", 0, 0x08, 3, n, h, w) + pix.tobytes())
    Path(labels_path).write_bytes(struct.pack(">HBBI", 0, 0x08, 1, n) + ds.labels.astype(np.uint8).tobytes())


# -- partitioning ------------------------------------------------------------


@dataclass
class PartitionSpec:
    kind: str = "label_shards"  # label_shards | dirichlet | iid
    # label_shards: list of [classes, devices] pairs
    groups: list[tuple[list[int], list[int]]] | None = None
    concentration: float = 0.5
    tags: list[str] | None = None  # explicit per-device tags (dirichlet / iid)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("label_shards", "dirichlet", "iid"):
            raise ValueError(f"unknown partition kind {self.kind!r}")
        if self.kind == "dirichlet" and not self.concentration > 0:
            raise ValueError("dirichlet concentration must be positive")
        if self.groups is not None:
            self.groups = [(sorted(int(c) for c in cl), sorted(int(d) for d in dv)) for cl, dv in self.groups]


def default_groups(num_classes: int, num_devices: int, n_groups: int = 3):
    """Contiguous class and device blocks; the last block takes the remainder.

    With 10 classes and 10 devices: classes 0-2 to devices 0-2, 3-5 to 3-5, 6-9 to 6-9.
    """
    if num_devices < n_groups or num_classes < n_groups:
        raise ValueError(f"need at least {n_groups} devices and classes for {n_groups} groups")

    def blocks(n):
        size = n // n_groups
        return [list(range(g * size, (g + 1) * size if g < n_groups - 1 else n)) for g in range(n_groups)]

    return list(zip(blocks(num_classes), blocks(num_devices)))


@dataclass
class DevicePartition:
    device_id: int
    tag: str
    train: np.ndarray
    val: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.train = np.asarray(self.train, dtype=np.int64)
        self.val = np.asarray(self.val, dtype=np.int64)
        self.test = np.asarray(self.test, dtype=np.int64)
        parts = np.concatenate([self.train, self.val, self.test])
        if np.unique(parts).size != parts.size:
            raise ValueError(f"device {self.device_id}: train/val/test indices overlap")

    @property
    def all_indices(self) -> np.ndarray:
        return np.sort(np.concatenate([self.train, self.val, self.test]))

    @property
    def num_train(self) -> int:
        return int(self.train.size)

    def to_dict(self) -> dict:
        return {"device_id": self.device_id, "tag": self.tag,
                "train": self.train.tolist(), "val": self.val.tolist(), "test": self.test.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DevicePartition":
        return cls(int(d["device_id"]), str(d["tag"]), d["train"], d["val"], d["test"])


def partition(dataset: Dataset, spec: PartitionSpec, num_devices: int, seed: int | None = None) -> list[DevicePartition]:
    """Assign every sample to exactly one device; all indices land in ``train``."""
    if num_devices < 1:
        raise ValueError("num_devices must be at least 1")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    labels = dataset.labels
    owned: list[list[np.ndarray]] = [[] for _ in range(num_devices)]
    tags = [None] * num_devices

    if spec.kind == "label_shards":
        groups = spec.groups or default_groups(dataset.num_classes, num_devices)
        devs = sorted(d for _, dv in groups for d in dv)
        if devs != list(range(num_devices)):
            raise ValueError(f"label_shards device sets must partition 0..{num_devices - 1}, got {devs}")
        classes = [c for cl, _ in groups for c in cl]
        if len(set(classes)) != len(classes):
            raise ValueError("label_shards groups must use disjoint class sets")
        for g, (cl, dv) in enumerate(groups):
            idx = np.flatnonzero(np.isin(labels, cl))
            idx = idx[rng.permutation(idx.size)]
            for d, chunk in zip(dv, np.array_split(idx, len(dv))):
                owned[d].append(chunk)
                tags[d] = f"group{g}"
        leftover = np.flatnonzero(~np.isin(labels, classes))
        if leftover.size:
            raise ValueError(f"classes {sorted(set(labels[leftover].tolist()))} belong to no group")
    elif spec.kind == "dirichlet":
        for c in range(dataset.num_classes):
            idx = np.flatnonzero(labels == c)
            idx = idx[rng.permutation(idx.size)]
            props = rng.dirichlet(np.full(num_devices, spec.concentration))
            cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
            for d, chunk in enumerate(np.split(idx, cuts)):
                owned[d].append(chunk)
    else:
        idx = rng.permutation(len(dataset))
        for d, chunk in enumerate(np.array_split(idx, num_devices)):
            owned[d].append(chunk)

    if spec.tags is not None:
        if len(spec.tags) != num_devices:
            raise ValueError(f"{len(spec.tags)} tags given for {num_devices} devices")
        tags = list(spec.tags)
    out = []
    for d in range(num_devices):
        idx = np.sort(np.concatenate(owned[d])) if owned[d] else np.zeros(0, np.int64)
        if idx.size == 0:
            raise ValueError(f"device {d} received no samples; retry with another seed")
        out.append(DevicePartition(d, tags[d] or "all", idx))
    return out


def split_train_val_test(part: DevicePartition, val_fraction: float = 0.1, test_fraction: float = 0.0,
                         seed: int = 0, search: bool = True) -> DevicePartition:
    """Disjoint random split of a device's samples; sizes are rounded to nearest."""
    if val_fraction < 0 or test_fraction < 0 or val_fraction + test_fraction >= 1:
        raise ValueError("fractions must be non-negative and sum to less than 1")
    idx = part.all_indices
    rng = np.random.default_rng([seed, part.device_id])
    idx = idx[rng.permutation(idx.size)]
    n_val = int(round(idx.size * val_fraction))
    n_test = int(round(idx.size * test_fraction))
    if search and n_val == 0:
        raise ValueError(f"device {part.device_id}: validation split is empty but search needs it")
    val, test, train = idx[:n_val], idx[n_val:n_val + n_test], idx[n_val + n_test:]
    if train.size == 0:
        raise ValueError(f"device {part.device_id}: no training samples left after split")
    return DevicePartition(part.device_id, part.tag, np.sort(train), np.sort(val), np.sort(test))


def save_manifest(parts: list[DevicePartition], path, seed: int, spec: PartitionSpec) -> None:
    doc = {
        "format": "fdnas-partition",
        "version": 1,
        "seed": seed,
        "spec": asdict(spec),
        "devices": [p.to_dict() for p in parts],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path) -> list[DevicePartition]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != "fdnas-partition":
        raise ValueError(f"{path}: not a partition manifest")
    return [DevicePartition.from_dict(d) for d in doc["devices"]]
