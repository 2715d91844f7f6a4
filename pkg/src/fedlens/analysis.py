"""Working with metric record logs: selection, deltas, CSV round-trips."""

from __future__ import annotations

from pathlib import Path

from scipy import stats

from .errors import FormatError
from .metrics import MetricRecord, relative_change

CSV_HEADER = "round,phase,client,layer,metric,value"


def select(records, round=None, phase=None, client=None, layer=None, metric=None):
    """Records matching every given field; each filter is a value or a set."""

    def match(value, want):
        if want is None:
            return True
        if isinstance(want, (set, frozenset, list, tuple, range)):
            return value in want
        return value == want

    return [r for r in records
            if match(r.round, round) and match(r.phase, phase)
            and match(r.client, client) and match(r.layer, layer)
            and match(r.metric, metric)]


def value_map(records):
    """Index records by (round, phase, client, layer, metric)."""
    return {(r.round, r.phase, r.client, r.layer, r.metric): r.value
            for r in records}


def relative_change_records(records):
    """Symmetric percentage change for every metric observed both pre and post.

    Emits phase "delta" records named rel_<metric>, keyed like the inputs.
    """
    by_key = {}
    for r in records:
        if r.phase in ("pre", "post"):
            by_key.setdefault((r.round, r.client, r.layer, r.metric), {})[r.phase] = r.value
    out = []
    for (rnd, client, layer, metric), phases in by_key.items():
        if "pre" in phases and "post" in phases:
            out.append(MetricRecord(rnd, "delta", client, layer, f"rel_{metric}",
                                    relative_change(phases["pre"], phases["post"])))
    out.sort(key=MetricRecord.sort_key)
    return out


def spearman(xs, ys) -> float:
    """Spearman rank correlation; 0.0 when either side is constant."""
    result = stats.spearmanr(xs, ys)
    value = float(result.statistic)
    return 0.0 if value != value else value  # NaN from constant input


def mean_over(records, metric, layers=None, rounds=None, phase=None, clients=None):
    """Mean value per layer of one metric, optionally restricted."""
    chosen = select(records, metric=metric, phase=phase, layer=layers,
                    round=rounds, client=clients)
    per_layer = {}
    for r in chosen:
        per_layer.setdefault(r.layer, []).append(r.value)
    return {layer: sum(vals) / len(vals) for layer, vals in sorted(per_layer.items())}


def records_to_csv(records) -> str:
    """Canonical CSV text: fixed header, rows sorted by the full key tuple."""
    lines = [CSV_HEADER]
    for r in sorted(records, key=MetricRecord.sort_key):
        lines.append(f"{r.round},{r.phase},{r.client},{r.layer},{r.metric},{r.value!r}")
    return "\n".join(lines) + "\n"


def write_csv(records, path) -> None:
    Path(path).write_text(records_to_csv(records), newline="\n")


def read_csv(path):
    """Parse a metric CSV written by this package back into records."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise FormatError(f"{path}: expected header {CSV_HEADER!r}")
    records = []
    for i, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise FormatError(f"{path}: line {i}: expected 6 fields, got {len(parts)}")
        rnd, phase, client, layer, metric, value = parts
        records.append(MetricRecord(int(rnd), phase, int(client), int(layer),
                                    metric, float(value)))
    return records
