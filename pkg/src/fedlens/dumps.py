"""Binary feature dumps and offline metric recomputation.

A feature dump file holds one captured feature matrix: magic "FPLF",
version u16, sample count u32, feature dim u32, layer u16, phase u8
(0 pre, 1 post), round u16, then row-major float32 values and u16 labels,
all little-endian. The owning client is encoded in the file name. Model
snapshots reuse the FPNV parameter-vector format.
"""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .metrics import (FeatureMatrix, MetricRecord, class_stats, pabs_alignment,
                      pairwise_distances, relative_change)
from .nn import ParamVector, load_params, save_params

FPLF_MAGIC = b"FPLF"
FPLF_VERSION = 1
FPLF_HEADER = struct.Struct("<4sHIIHBH")
_PHASE_CODE = {"pre": 0, "post": 1}
_PHASE_NAME = {0: "pre", 1: "post"}

_FEATURE_RE = re.compile(r"features_r(\d+)_c(\d+)_l(\d+)_(pre|post)\.fplf$")
_MODEL_RE = re.compile(r"model_r(\d+)_c(\d+)_(pre|post)\.fpnv$")


def feature_filename(round_index: int, client: int, layer: int, phase: str) -> str:
    return f"features_r{round_index:05d}_c{client}_l{layer}_{phase}.fplf"


def model_filename(round_index: int, client: int, phase: str) -> str:
    return f"model_r{round_index:05d}_c{client}_{phase}.fpnv"


def write_features(path, fm: FeatureMatrix) -> None:
    if fm.phase not in _PHASE_CODE:
        raise FormatError(f"cannot dump phase {fm.phase!r}")
    if fm.labels.size and (fm.labels.min() < 0 or fm.labels.max() > 0xFFFF):
        raise FormatError("labels do not fit in u16")
    header = FPLF_HEADER.pack(FPLF_MAGIC, FPLF_VERSION, fm.n, fm.dim,
                              fm.layer, _PHASE_CODE[fm.phase], fm.round)
    payload = fm.values.astype("<f4").tobytes() + fm.labels.astype("<u2").tobytes()
    Path(path).write_bytes(header + payload)


def read_features(path, client: int = -1) -> FeatureMatrix:
    data = Path(path).read_bytes()
    if len(data) < FPLF_HEADER.size:
        raise FormatError(f"{path}: truncated header at offset 0")
    magic, version, n, dim, layer, phase, round_index = FPLF_HEADER.unpack_from(data, 0)
    if magic != FPLF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != FPLF_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    if phase not in _PHASE_NAME:
        raise FormatError(f"{path}: unknown phase code {phase} at offset 16")
    need = FPLF_HEADER.size + n * dim * 4 + n * 2
    if len(data) != need:
        raise FormatError(
            f"{path}: expected {need} bytes, found mismatch at offset "
            f"{min(len(data), need)}")
    values = np.frombuffer(data, dtype="<f4", count=n * dim,
                           offset=FPLF_HEADER.size).astype(np.float64).reshape(n, dim)
    labels = np.frombuffer(data, dtype="<u2", count=n,
                           offset=FPLF_HEADER.size + n * dim * 4).astype(int)
    return FeatureMatrix(values, labels, layer=layer, phase=_PHASE_NAME[phase],
                         round=round_index, client=client)


def write_round_dumps(dump_dir, taps: dict, round_index: int, client: int,
                      phase: str, model: ParamVector = None) -> None:
    """Persist one capture: every tapped feature matrix plus optional model."""
    root = Path(dump_dir)
    root.mkdir(parents=True, exist_ok=True)
    for layer, fm in taps.items():
        write_features(root / feature_filename(round_index, client, layer, phase), fm)
    if model is not None:
        save_params(model, root / model_filename(round_index, client, phase))


def _interface_weight_from_vector(pv: ParamVector, layer: int):
    """First 2-D tensor of a 1-based layer, the matrix consuming its inputs."""
    for e in pv.layout:
        if e.layer == layer and len(e.shape) == 2:
            return pv.values[e.offset:e.offset + e.size].reshape(e.shape)
    return None


def metrics_from_dumps(dump_dir):
    """Recompute feature metrics from dump files.

    Pre/post captures pair by (round, client, layer); unpaired files produce a
    warning and are skipped. Alignment is recomputed only where matching model
    snapshots exist. Returns (records, warnings).
    """
    root = Path(dump_dir)
    features = {}
    for path in sorted(root.glob("*.fplf")):
        m = _FEATURE_RE.match(path.name)
        if not m:
            continue
        rnd, client, layer, phase = (int(m.group(1)), int(m.group(2)),
                                     int(m.group(3)), m.group(4))
        fm = read_features(path, client=client)
        if (fm.round, fm.layer, fm.phase) != (rnd, layer, phase):
            raise FormatError(f"{path}: header disagrees with file name")
        features[(rnd, client, layer, phase)] = fm
    models = {}
    for path in sorted(root.glob("*.fpnv")):
        m = _MODEL_RE.match(path.name)
        if not m:
            continue
        models[(int(m.group(1)), int(m.group(2)), m.group(3))] = load_params(path)

    records = []
    warnings = []
    keys = sorted({(rnd, client, layer) for rnd, client, layer, _ in features})
    for rnd, client, layer in keys:
        pre = features.get((rnd, client, layer, "pre"))
        post = features.get((rnd, client, layer, "post"))
        if pre is None or post is None:
            missing = "pre" if pre is None else "post"
            warnings.append(
                f"round {rnd} client {client} layer {layer}: missing {missing} dump, skipped")
            continue
        phase_stats = {}
        alignments = {}
        for phase, fm in (("pre", pre), ("post", post)):
            cs = class_stats(fm)
            phase_stats[phase] = cs
            records.extend([
                MetricRecord(rnd, phase, client, layer, "sigma_w", cs.sigma_w),
                MetricRecord(rnd, phase, client, layer, "sigma_b", cs.sigma_b),
                MetricRecord(rnd, phase, client, layer, "tr_w", cs.tr_w),
                MetricRecord(rnd, phase, client, layer, "tr_b", cs.tr_b),
                MetricRecord(rnd, phase, client, layer, "tr_t", cs.tr_t),
            ])
            model = models.get((rnd, client, phase))
            if model is not None:
                weights = _interface_weight_from_vector(model, layer + 1)
                if weights is not None:
                    align = pabs_alignment(cs.mu, weights)
                    alignments[phase] = align.mean_alignment
                    records.append(MetricRecord(rnd, phase, client, layer,
                                                "alignment", align.mean_alignment))
        if len(alignments) == 2:
            records.append(MetricRecord(
                rnd, "delta", client, layer, "rel_alignment",
                relative_change(alignments["pre"], alignments["post"])))
        d = pairwise_distances(pre, post)
        records.extend([
            MetricRecord(rnd, "delta", client, layer, "dist_l1_norm", d.l1_norm),
            MetricRecord(rnd, "delta", client, layer, "dist_mse", d.mse),
            MetricRecord(rnd, "delta", client, layer, "dist_l1", d.l1),
            MetricRecord(rnd, "delta", client, layer, "dist_cos", d.cosine),
        ])
        for name in ("sigma_w", "sigma_b", "tr_w", "tr_b", "tr_t"):
            records.append(MetricRecord(
                rnd, "delta", client, layer, f"rel_{name}",
                relative_change(getattr(phase_stats["pre"], name),
                                getattr(phase_stats["post"], name))))
    records.sort(key=MetricRecord.sort_key)
    return records, warnings
