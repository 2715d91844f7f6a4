"""Client datasets: synthetic covariate-shifted federations and IDX ingestion.

Every client shares one set of class anchor points; client m applies its own
affine distortion (orthogonal rotation, per-coordinate scaling, offset) to
anchor_c + sigma * gaussian draws. Identical distortions give an i.i.d.
control federation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .nn import labels_of, one_hot
from .seeds import derive_seed

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class DomainSpec:
    """Per-client generative recipe for class-conditional gaussian data.

    A sample of class c is scaling * (rotation @ (mean_c + sigma * g)) + offset
    with g standard normal. label_noise is the probability that a training
    label is flipped to a uniformly random other class.
    """

    num_classes: int
    input_dim: int
    class_means: np.ndarray  # (num_classes, input_dim)
    within_class_scale: float
    rotation: np.ndarray     # (input_dim, input_dim), orthogonal
    scaling: np.ndarray      # (input_dim,)
    offset: np.ndarray       # (input_dim,)
    label_noise: float = 0.0

    def __post_init__(self):
        c, n = self.num_classes, self.input_dim
        if c < 2 or n < 1:
            raise ShapeError("need at least two classes and one input dimension")
        if self.class_means.shape != (c, n):
            raise ShapeError(f"class_means must be ({c}, {n})")
        if self.rotation.shape != (n, n):
            raise ShapeError(f"rotation must be ({n}, {n})")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(n)).max()
        if err > 1e-10:
            raise ShapeError(f"rotation is not orthogonal (error {err:.2e})")
        if self.scaling.shape != (n,) or self.offset.shape != (n,):
            raise ShapeError(f"scaling and offset must be ({n},)")
        if not self.within_class_scale > 0:
            raise ShapeError("within_class_scale must be positive")
        if not 0.0 <= self.label_noise < 1.0:
            raise ShapeError("label_noise must be in [0, 1)")

    def transform(self, v: np.ndarray) -> np.ndarray:
        """Apply the domain distortion to rows of v."""
        return (v @ self.rotation.T) * self.scaling + self.offset


@dataclass
class ClientDataset:
    """One client's train/test split with one-hot labels."""

    client_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def n_train(self) -> int:
        return len(self.train_x)

    @property
    def num_classes(self) -> int:
        return self.train_y.shape[1]

    @property
    def train_labels(self) -> np.ndarray:
        return labels_of(self.train_y)

    @property
    def test_labels(self) -> np.ndarray:
        return labels_of(self.test_y)


def haar_rotation(n: int, rng) -> np.ndarray:
    """Random orthogonal matrix from the QR of a gaussian matrix."""
    m = rng.normal(size=(n, n))
    q, r = np.linalg.qr(m)
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def make_domain_specs(num_clients: int, num_classes: int, input_dim: int, seed: int,
                      anchor_scale: float = 3.0, within_class_scale: float = 1.0,
                      scale_range=(1.0, 1.0), offset_scale: float = 0.0,
                      rotation: str = "random", label_noise: float = 0.0):
    """Shared anchors plus per-client distortions.

    rotation "identity" with scale_range (1, 1) and offset_scale 0 makes all
    clients draw from the same distribution.
    """
    if rotation not in ("random", "identity"):
        raise ConfigError(f"unknown rotation mode {rotation!r}", field="rotation")
    anchors = np.random.default_rng(derive_seed(seed, "anchors")).normal(
        size=(num_classes, input_dim)) * anchor_scale
    lo, hi = scale_range
    specs = []
    for m in range(num_clients):
        rng = np.random.default_rng(derive_seed(seed, "domain", m))
        rot = haar_rotation(input_dim, rng) if rotation == "random" else np.eye(input_dim)
        scaling = rng.uniform(lo, hi, size=input_dim)
        offset = rng.normal(size=input_dim) * offset_scale
        specs.append(DomainSpec(
            num_classes=num_classes, input_dim=input_dim, class_means=anchors,
            within_class_scale=within_class_scale, rotation=rot,
            scaling=scaling, offset=offset, label_noise=label_noise))
    return specs


def _draw_split(spec: DomainSpec, count: int, balanced: bool, rng, with_noise: bool):
    c = spec.num_classes
    if balanced:
        per = count // c
        rem = count - per * c
        counts = [per + (1 if i < rem else 0) for i in range(c)]
        labels = np.repeat(np.arange(c), counts)
    else:
        labels = rng.integers(0, c, size=count)
    g = rng.normal(size=(count, spec.input_dim))
    x = spec.transform(spec.class_means[labels] + spec.within_class_scale * g)
    if with_noise and spec.label_noise > 0:
        flip = rng.random(count) < spec.label_noise
        shift = rng.integers(1, c, size=count)
        labels = np.where(flip, (labels + shift) % c, labels)
    perm = rng.permutation(count)
    return x[perm], one_hot(labels[perm], c)


def generate_federation_data(specs, n_train: int, n_test: int, seed: int,
                             balanced: bool = True):
    """Draw deterministic train/test splits for every client."""
    if not specs:
        raise ConfigError("need at least one domain spec", field="data")
    base = specs[0]
    for sp in specs:
        if (sp.num_classes, sp.input_dim) != (base.num_classes, base.input_dim):
            raise ConfigError("domain specs disagree on classes or input dim",
                              field="data")
    if n_train < base.num_classes or n_test < base.num_classes:
        raise ConfigError("need at least one sample per class in each split",
                          field="data")
    datasets = []
    for m, sp in enumerate(specs):
        rng = np.random.default_rng(derive_seed(seed, "samples", m))
        train_x, train_y = _draw_split(sp, n_train, balanced, rng, with_noise=True)
        test_x, test_y = _draw_split(sp, n_test, balanced, rng, with_noise=False)
        datasets.append(ClientDataset(m, train_x, train_y, test_x, test_y))
    return datasets


def _subset_split(x, y, per_class: int, rng):
    if len(x) == 0:
        return x, y
    labels = labels_of(y)
    picks = []
    deficient = {}
    for c in range(y.shape[1]):
        idx = np.flatnonzero(labels == c)
        if len(idx) < per_class:
            deficient[c] = len(idx)
        else:
            picks.append(rng.permutation(idx)[:per_class])
    if deficient:
        detail = ", ".join(f"class {c} has {n}" for c, n in sorted(deficient.items()))
        raise ValueError(f"insufficient samples for {per_class} per class: {detail}")
    idx = np.concatenate(picks)
    idx = idx[rng.permutation(len(idx))]
    return x[idx], y[idx]


def balanced_eval_subset(ds: ClientDataset, per_class: int, seed: int) -> ClientDataset:
    """Exactly per_class samples of every class from each non-empty split."""
    if per_class < 1:
        raise ValueError("per_class must be positive")
    rng = np.random.default_rng(seed)
    train_x, train_y = _subset_split(ds.train_x, ds.train_y, per_class, rng)
    test_x, test_y = _subset_split(ds.test_x, ds.test_y, per_class, rng)
    return ClientDataset(ds.client_id, train_x, train_y, test_x, test_y)


def _read_idx(path, expect_magic, kind):
    data = Path(path).read_bytes()
    head = 4 + 4 * (3 if kind == "images" else 1)
    if len(data) < 8:
        raise FormatError(f"{path}: truncated header at offset 0")
    magic, = struct.unpack_from(">I", data, 0)
    if magic != expect_magic:
        raise FormatError(
            f"{path}: bad {kind} magic 0x{magic:08x} at offset 0 "
            f"(expected 0x{expect_magic:08x})")
    if len(data) < head:
        raise FormatError(f"{path}: truncated dimension header at offset {len(data)}")
    if kind == "images":
        n, rows, cols = struct.unpack_from(">III", data, 4)
        need = head + n * rows * cols
        if len(data) != need:
            raise FormatError(
                f"{path}: expected {need} bytes, found mismatch at offset "
                f"{min(len(data), need)}")
        arr = np.frombuffer(data, dtype=np.uint8, offset=head).reshape(n, rows * cols)
        return arr
    n, = struct.unpack_from(">I", data, 4)
    need = head + n
    if len(data) != need:
        raise FormatError(
            f"{path}: expected {need} bytes, found mismatch at offset "
            f"{min(len(data), need)}")
    return np.frombuffer(data, dtype=np.uint8, offset=head)


def load_idx(images_path, labels_path, max_per_class=None, normalize: bool = True,
             client_id: int = 0) -> ClientDataset:
    """Load big-endian IDX image/label files into a train-only ClientDataset.

    The test split is left empty; callers pair two loads when they have a
    separate held-out file. max_per_class keeps the first k occurrences of
    each class in file order.
    """
    images = _read_idx(images_path, IDX_IMAGE_MAGIC, "images")
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC, "labels")
    if len(images) != len(labels):
        raise FormatError(
            f"{images_path}: {len(images)} images but {len(labels)} labels")
    if len(labels) == 0:
        raise FormatError(f"{images_path}: empty dataset")
    if max_per_class is not None:
        keep = []
        seen = {}
        for i, lab in enumerate(labels):
            lab = int(lab)
            if seen.get(lab, 0) < max_per_class:
                seen[lab] = seen.get(lab, 0) + 1
                keep.append(i)
        images = images[keep]
        labels = labels[keep]
    x = images.astype(np.float64)
    if normalize:
        x = x / 255.0
    c = int(labels.max()) + 1
    y = one_hot(labels.astype(int), c)
    empty_x = np.zeros((0, x.shape[1]))
    empty_y = np.zeros((0, c))
    return ClientDataset(client_id, x, y, empty_x, empty_y)


def merge_train_test(train: ClientDataset, test: ClientDataset) -> ClientDataset:
    """Combine two train-only datasets into one with a proper test split."""
    if train.train_x.shape[1] != test.train_x.shape[1]:
        raise ShapeError("train and test feature dimensions differ")
    c = max(train.num_classes, test.num_classes)

    def widen(y):
        if y.shape[1] == c:
            return y
        out = np.zeros((len(y), c))
        out[:, :y.shape[1]] = y
        return out

    return ClientDataset(train.client_id, train.train_x, widen(train.train_y),
                         test.train_x, widen(test.train_y))
