"""Feature-quality diagnostics computed layer by layer.

The central quantities, for features z with labels over C observed classes:

* within-class trace   tr_w = (1/N) sum_c sum_i ||z_ci - mu_c||^2
* between-class trace  tr_b = (1/C) sum_c ||mu_c - mu_g||^2
* total trace          tr_t = (1/N) sum_i ||z_i - mu_g||^2
* normalized variances sigma_w = tr_w / tr_t and sigma_b = tr_b / tr_t

With balanced classes tr_t = tr_w + tr_b, so sigma_w + sigma_b = 1. Traces
are accumulated as sums of squared deviations, never as DxD covariance
matrices. Subspace alignment compares the row space of the class-mean matrix
against the input-space basis (top right singular vectors) of the weight
matrix that consumes those features; the score is the mean principal-angle
cosine.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import ShapeError
from .nn import LayerSpec, Network, ParamVector, one_hot, sgd_epochs
from .seeds import derive_seed

PHASES = ("pre", "post", "tuned", "delta")

# Exact metric names plus prefix families (probe sources, relative changes).
REGISTERED_METRICS = frozenset({
    "sigma_w", "sigma_b", "tr_w", "tr_b", "tr_t", "alignment",
    "train_acc", "test_acc", "probe_acc",
    "dist_l1_norm", "dist_mse", "dist_l1", "dist_cos",
    "param_dist_l1_norm", "param_dist_mse", "param_dist_l1", "param_dist_cos",
})
METRIC_PREFIXES = ("probe_acc_m", "rel_")


def is_registered(name: str) -> bool:
    return name in REGISTERED_METRICS or name.startswith(METRIC_PREFIXES)


@dataclass
class FeatureMatrix:
    """N feature rows with integer class labels and capture context."""

    values: np.ndarray
    labels: np.ndarray
    layer: int = -1
    phase: str = "pre"
    round: int = 0
    client: int = -1

    def __post_init__(self):
        self.values = linalg.as_matrix(self.values, "features")
        self.labels = np.asarray(self.labels, dtype=int)
        if self.labels.ndim != 1 or len(self.labels) != len(self.values):
            raise ShapeError("labels must be one integer per feature row")
        if len(self.values) == 0:
            raise ShapeError("feature matrix needs at least one row")

    @property
    def n(self) -> int:
        return len(self.values)

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ClassStats:
    """Per-class means and scatter traces of one feature matrix."""

    class_ids: np.ndarray
    mu: np.ndarray        # (num observed classes, D) class means
    mu_global: np.ndarray
    tr_w: float
    tr_b: float
    tr_t: float
    sigma_w: float
    sigma_b: float
    degenerate: bool = False


@dataclass(frozen=True)
class AlignmentResult:
    """Principal-angle cosines between a feature subspace and a weight subspace."""

    cosines: np.ndarray
    mean_alignment: float
    degenerate: bool = False


@dataclass(frozen=True)
class MetricRecord:
    """One scalar observation; layer -1 marks whole-model metrics."""

    round: int
    phase: str
    client: int
    layer: int
    metric: str
    value: float

    def sort_key(self):
        return (self.round, self.phase, self.client, self.layer, self.metric)


@dataclass(frozen=True)
class PairwiseDistances:
    """Elementwise and row-wise distances between two equal-shape matrices."""

    l1_norm: float
    mse: float
    l1: float
    cosine: float


def class_stats(features, labels=None) -> ClassStats:
    """Class means plus within/between/total scatter traces.

    Accepts a FeatureMatrix or a (values, labels) pair. If the total trace is
    zero (all rows identical) the normalized variances are reported as zeros
    and the result is flagged degenerate.
    """
    if isinstance(features, FeatureMatrix):
        values, labels = features.values, features.labels
    else:
        values = linalg.as_matrix(features, "features")
        labels = np.asarray(labels, dtype=int)
    if len(labels) != len(values):
        raise ShapeError("labels must match feature rows")
    n = len(values)
    class_ids = np.unique(labels)
    mu = np.stack([values[labels == c].mean(axis=0) for c in class_ids])
    mu_global = values.mean(axis=0)
    tr_w = 0.0
    for i, c in enumerate(class_ids):
        dev = values[labels == c] - mu[i]
        tr_w += float((dev * dev).sum())
    tr_w /= n
    diff = mu - mu_global
    tr_b = float((diff * diff).sum()) / len(class_ids)
    dev = values - mu_global
    tr_t = float((dev * dev).sum()) / n
    if tr_t == 0.0:
        return ClassStats(class_ids, mu, mu_global, tr_w, tr_b, tr_t,
                          sigma_w=0.0, sigma_b=0.0, degenerate=True)
    return ClassStats(class_ids, mu, mu_global, tr_w, tr_b, tr_t,
                      sigma_w=tr_w / tr_t, sigma_b=tr_b / tr_t)


def weight_input_basis(weights, top: int) -> np.ndarray:
    """Orthonormal basis (columns) of the dominant input directions of a weight matrix.

    Takes the right singular vectors for the `top` largest non-zero singular
    values; fewer columns come back when the matrix has lower rank.
    """
    f = linalg.svd(weights)
    keep = min(top, f.rank)
    return f.v[:, :keep]


def pabs_alignment(class_means, next_weights, weight_basis=None) -> AlignmentResult:
    """Mean principal-angle cosine between class-mean rows and weight input space.

    The class-mean matrix (C x D) contributes the basis of its row space; the
    weight matrix that consumes these features (out x D) contributes its top-C
    input-space basis. Cosines are the singular values of the basis cross
    product, clipped into [0, 1]. A rank-zero side gives alignment 0 and a
    degenerate flag.
    """
    z = linalg.as_matrix(class_means, "class means")
    w = linalg.as_matrix(next_weights, "weights")
    if z.shape[1] != w.shape[1]:
        raise ShapeError(
            f"feature dim mismatch: class means {z.shape} vs weights {w.shape}")
    c = z.shape[0]
    fz = linalg.svd(z)
    basis_z = fz.v[:, :fz.rank]
    if weight_basis is None:
        weight_basis = weight_input_basis(w, c)
    if basis_z.shape[1] == 0 or weight_basis.shape[1] == 0:
        return AlignmentResult(np.zeros(0), 0.0, degenerate=True)
    cross = weight_basis.T @ basis_z
    cosines = np.clip(linalg.svd(cross).s, 0.0, 1.0)
    return AlignmentResult(cosines, float(cosines.mean()))


def accuracy(logits, labels) -> float:
    """Fraction of argmax predictions matching labels; ties pick the lowest class."""
    logits = linalg.as_matrix(logits, "logits")
    labels = np.asarray(labels, dtype=int)
    if len(labels) != len(logits):
        raise ShapeError("labels must match logit rows")
    if len(labels) == 0:
        raise ShapeError("cannot score an empty batch")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def linear_probe(train_features: FeatureMatrix, test_features: FeatureMatrix,
                 epochs: int = 100, lr: float = 0.01, batch_size: int = 64,
                 seed: int = 0) -> float:
    """Best test accuracy of a fresh linear classifier on frozen features.

    Plain SGD (no momentum); test accuracy is evaluated after every epoch and
    the maximum over epochs is returned.
    """
    if train_features.dim != test_features.dim:
        raise ShapeError("train and test feature dims differ")
    c = int(max(train_features.labels.max(), test_features.labels.max())) + 1
    probe = Network([LayerSpec("linear", train_features.dim, c)])
    probe.init_random(derive_seed(seed, "probe-init"))
    y_train = one_hot(train_features.labels, c)
    best = 0.0
    for epoch in range(epochs):
        sgd_epochs(probe, train_features.values, y_train, epochs=1, lr=lr,
                   momentum=0.0, batch_size=batch_size,
                   seed=derive_seed(seed, "probe-epoch", epoch))
        logits, _ = probe.forward(test_features.values)
        best = max(best, accuracy(logits, test_features.labels))
    return best


def _as_rows(obj) -> np.ndarray:
    if isinstance(obj, FeatureMatrix):
        return obj.values
    if isinstance(obj, ParamVector):
        return obj.values.reshape(1, -1)
    arr = np.asarray(obj, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return linalg.as_matrix(arr, "operand")


def pairwise_distances(pre, post) -> PairwiseDistances:
    """Four scalar distances between two matrices of identical shape.

    l1_norm averages |a-b| / (|a|+|b|) elementwise (0 where both are 0);
    mse and l1 are plain means; cosine averages row-wise cosine similarity
    (1 when both rows are zero, 0 when exactly one is).
    """
    a = _as_rows(pre)
    b = _as_rows(post)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = np.abs(a - b)
    denom = np.abs(a) + np.abs(b)
    l1_norm = float(np.divide(diff, denom, out=np.zeros_like(diff),
                              where=denom > 0).mean())
    mse = float(((a - b) ** 2).mean())
    l1 = float(diff.mean())
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    dots = np.einsum("ij,ij->i", a, b)
    both_zero = (na == 0) & (nb == 0)
    one_zero = ((na == 0) | (nb == 0)) & ~both_zero
    safe = np.maximum(na * nb, np.finfo(np.float64).tiny)
    cos = dots / safe
    cos = np.where(both_zero, 1.0, cos)
    cos = np.where(one_zero, 0.0, cos)
    return PairwiseDistances(l1_norm, mse, l1, float(cos.mean()))


def relative_change(pre: float, post: float) -> float:
    """Symmetric percentage change |post-pre| / (|pre|+|post|) * 100."""
    denom = abs(pre) + abs(post)
    if denom == 0.0:
        return 0.0
    return abs(post - pre) / denom * 100.0


def pool_features(raw, labels=None, target=(2, 2)) -> FeatureMatrix:
    """Adaptive average pooling of an (N, H, W, C) stack, flattened row-major.

    Spatial bin b along an axis of length H covers rows
    [floor(b*H/t), floor((b+1)*H/t)), widened to at least one row so length-1
    axes replicate instead of vanishing.
    """
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"raw features must be (N, H, W, C), got {arr.shape}")
    n, h, w, c = arr.shape
    th, tw = target

    def edges(size, t):
        spans = []
        for b in range(t):
            lo = (b * size) // t
            hi = max(lo + 1, ((b + 1) * size) // t)
            spans.append((lo, min(hi, size)))
        return spans

    pooled = np.zeros((n, th, tw, c))
    for bi, (r0, r1) in enumerate(edges(h, th)):
        for bj, (c0, c1) in enumerate(edges(w, tw)):
            pooled[:, bi, bj, :] = arr[:, r0:r1, c0:c1, :].mean(axis=(1, 2))
    flat = pooled.reshape(n, th * tw * c)
    if labels is None:
        labels = np.zeros(n, dtype=int)
    return FeatureMatrix(flat, labels)


def extract_tap_features(net: Network, x, labels, tap_layers=None,
                         batch_size: int = 256, phase: str = "pre",
                         round_index: int = 0, client: int = -1):
    """Forward in batches and concatenate the requested taps.

    Returns {tap index: FeatureMatrix}. Taps default to every layer input,
    0 (raw batch) through L-1 (penultimate feature).
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if tap_layers is None:
        tap_layers = range(net.num_layers)
    tap_layers = sorted(set(int(t) for t in tap_layers))
    for t in tap_layers:
        if not 0 <= t < net.num_layers:
            raise ShapeError(f"tap {t} out of range 0..{net.num_layers - 1}")
    chunks = {t: [] for t in tap_layers}
    for start in range(0, len(x), batch_size):
        _, taps = net.forward(x[start:start + batch_size])
        for t in tap_layers:
            chunks[t].append(taps[t])
    return {t: FeatureMatrix(np.concatenate(chunks[t]), labels, layer=t,
                             phase=phase, round=round_index, client=client)
            for t in tap_layers}


def variance_alignment_records(net: Network, taps: dict):
    """Scatter traces, normalized variances, and alignment per tapped layer.

    Alignment at tap l compares that tap's class means against the weights of
    layer l+1, the layer that consumes the features; at the deepest tap this
    is the classifier interface. Returns (layer, metric, value) tuples.
    """
    out = []
    for t in sorted(taps):
        fm = taps[t]
        cs = class_stats(fm)
        out.append((t, "sigma_w", cs.sigma_w))
        out.append((t, "sigma_b", cs.sigma_b))
        out.append((t, "tr_w", cs.tr_w))
        out.append((t, "tr_b", cs.tr_b))
        out.append((t, "tr_t", cs.tr_t))
        weights = net.interface_weight(t + 1)
        align = pabs_alignment(cs.mu, weights)
        out.append((t, "alignment", align.mean_alignment))
    return out
