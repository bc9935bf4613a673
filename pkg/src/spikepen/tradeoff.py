"""Trade-off-curve metrics over collections of experiment outcomes.

A run contributes one point (x = energy rate, y = accuracy). The curve score
is the normalized area under the monotonized energy-accuracy curve above an
accuracy cutoff; rank correlation and mutual information quantify how tightly
the two axes co-move once low-accuracy runs are cut off. Metrics that are
undefined for an input (empty curve, constant sequence) return NaN rather
than raising.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import DimensionError, ParameterError


@dataclass
class RunRecord:
    """One experiment outcome, the row type consumed by the curve metrics."""

    lambda_prime: float
    seed: int
    accuracy: float
    energy_rate: float
    dead_rate: float
    firing_rate: float
    e_snn_pj: float
    valid: bool = True


# ---------------------------------------------------------------------------
# area under the monotonized trade-off curve


def _segment_area_above(x0, y0, x1, y1, cut):
    """Area between the segment (x0,y0)-(x1,y1) and the horizontal line y=cut."""
    if x1 <= x0:
        return 0.0
    a, b = y0 - cut, y1 - cut
    width = x1 - x0
    if a <= 0.0 and b <= 0.0:
        return 0.0
    if a >= 0.0 and b >= 0.0:
        return 0.5 * (a + b) * width
    t = a / (a - b)  # crossing point as a fraction of the width
    if a > 0.0:
        return 0.5 * a * t * width
    return 0.5 * b * (1.0 - t) * width


def auc(points, cutoff_percent: float = 0.0) -> float:
    """Normalized area under the monotonized curve above the cutoff.

    Steps: sort by x ascending (stable); drop points with x > 1; prepend
    (x_first, 0); append (1, max y); keep points whose y is >= every earlier
    kept y (ties kept); integrate max(y - cutoff, 0) along the linear
    interpolation from the first x to 1 (area left of the first x is zero);
    divide by (1 - cutoff). Returns NaN when no points survive the filter.
    """
    if not 0 <= cutoff_percent < 100:
        raise ParameterError(f"cutoff must lie in [0, 100), got {cutoff_percent}")
    pts = sorted(((float(x), float(y)) for x, y in points), key=lambda p: p[0])
    pts = [(x, y) for x, y in pts if x <= 1.0]
    if not pts:
        return math.nan
    y_max = max(y for _, y in pts)
    pts = [(pts[0][0], 0.0)] + pts + [(1.0, y_max)]

    kept = []
    running = -math.inf
    for x, y in pts:
        if y >= running:
            kept.append((x, y))
            running = y

    cut = cutoff_percent / 100.0
    area = 0.0
    for (x0, y0), (x1, y1) in zip(kept, kept[1:]):
        area += _segment_area_above(x0, y0, x1, y1, cut)
    return area / (1.0 - cut)


# ---------------------------------------------------------------------------
# rank correlation


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    sv = v[order]
    i = 0
    while i < len(sv):
        j = i
        while j < len(sv) and sv[j] == sv[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0  # 1-based average rank
        i = j
    return ranks


def spearman(x, y) -> float:
    """Pearson correlation of average ranks; NaN for a constant sequence."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"spearman needs two equal-length vectors, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise ParameterError(f"spearman needs at least 2 samples, got {len(x)}")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0.0:
        return math.nan
    return float((rx * ry).sum() / denom)


# ---------------------------------------------------------------------------
# mutual information


def _quantile_bin(v: np.ndarray, bins: int) -> np.ndarray:
    edges = np.quantile(v, np.linspace(0.0, 1.0, bins + 1)[1:-1])
    return np.searchsorted(edges, v, side="right")


def mutual_information(x, y, bins: int = 8) -> float:
    """Histogram plug-in MI in nats with equal-frequency binning per axis."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"mutual_information needs equal-length vectors, got {x.shape} and {y.shape}")
    if bins < 2:
        raise ParameterError(f"bins must be >= 2, got {bins}")
    if len(x) < bins:
        raise ParameterError(f"need at least as many samples as bins ({bins}), got {len(x)}")
    ix = _quantile_bin(x, bins)
    iy = _quantile_bin(y, bins)
    joint = np.zeros((bins, bins), dtype=np.float64)
    np.add.at(joint, (ix, iy), 1.0)
    joint /= len(x)
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)
    nz = joint > 0
    outer = np.outer(px, py)
    return float((joint[nz] * np.log(joint[nz] / outer[nz])).sum())


# ---------------------------------------------------------------------------
# record filtering and summaries


def cutoff_filter(records: list[RunRecord], cutoff_percent: float) -> list[RunRecord]:
    """Valid records whose accuracy is strictly over the cutoff."""
    cut = cutoff_percent / 100.0
    return [r for r in records if r.valid and r.accuracy > cut]


def summary(records: list[RunRecord], cutoffs=(70, 50), mi_bins: int = 8) -> dict[str, float]:
    """Table of AUC(P) [%], Spearman(P), MI(P) for the given cutoffs."""
    out: dict[str, float] = {}
    curve = [(r.energy_rate, r.accuracy) for r in records if r.valid]
    for p in cutoffs:
        out[f"auc_{p}"] = 100.0 * auc(curve, p) if curve else math.nan
        kept = cutoff_filter(records, p)
        xs = [r.energy_rate for r in kept]
        ys = [r.accuracy for r in kept]
        try:
            out[f"spearman_{p}"] = spearman(xs, ys)
        except (ParameterError, DimensionError):
            out[f"spearman_{p}"] = math.nan
        try:
            out[f"mi_{p}"] = mutual_information(xs, ys, bins=mi_bins)
        except (ParameterError, DimensionError):
            out[f"mi_{p}"] = math.nan
    return out


# ---------------------------------------------------------------------------
# CSV I/O

_RECORD_FIELDS = [f.name for f in fields(RunRecord)]


def write_records_csv(path: str, records: list[RunRecord]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(_RECORD_FIELDS)
        for r in records:
            writer.writerow(
                [
                    repr(r.lambda_prime), r.seed, repr(r.accuracy), repr(r.energy_rate),
                    repr(r.dead_rate), repr(r.firing_rate), repr(r.e_snn_pj), int(r.valid),
                ]
            )


def read_records_csv(path: str) -> list[RunRecord]:
    records = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            records.append(
                RunRecord(
                    lambda_prime=float(row["lambda_prime"]),
                    seed=int(row["seed"]),
                    accuracy=float(row["accuracy"]),
                    energy_rate=float(row["energy_rate"]),
                    dead_rate=float(row["dead_rate"]),
                    firing_rate=float(row["firing_rate"]),
                    e_snn_pj=float(row["e_snn_pj"]),
                    valid=bool(int(row["valid"])),
                )
            )
    return records


def write_summary_csv(path: str, rows: list[dict]):
    if not rows:
        raise ParameterError("summary CSV needs at least one row")
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
