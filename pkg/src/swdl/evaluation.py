"""Segmentation metrics, bootstrap intervals and the Wilcoxon signed-rank test."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ArgumentError, MetricUndefinedError

METRICS = ("dice", "hd95", "asd", "acc", "pre", "jac")
_SIX = ndimage.generate_binary_structure(3, 1)


def _pair(S, G) -> tuple[np.ndarray, np.ndarray]:
    S, G = np.asarray(S, dtype=bool), np.asarray(G, dtype=bool)
    if S.shape != G.shape:
        raise ArgumentError(f"mask shapes differ: {S.shape} vs {G.shape}")
    return S, G


# -- overlap metrics --------------------------------------------------------

def dice(S, G) -> float:
    S, G = _pair(S, G)
    total = int(S.sum()) + int(G.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((S & G).sum()) / total


def jaccard(S, G) -> float:
    S, G = _pair(S, G)
    union = int((S | G).sum())
    if union == 0:
        return 1.0
    return int((S & G).sum()) / union


def accuracy(S, G) -> float:
    S, G = _pair(S, G)
    return int((S == G).sum()) / S.size


def precision(S, G) -> float:
    S, G = _pair(S, G)
    n_pred = int(S.sum())
    if n_pred == 0:
        raise MetricUndefinedError("precision undefined for an empty prediction")
    return int((S & G).sum()) / n_pred


# -- surface distances --------------------------------------------------------

def surface_voxels(mask) -> np.ndarray:
    """(k, 3) coordinates of foreground voxels with a background 6-neighbor."""
    m = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(m, structure=_SIX, border_value=0)
    return np.argwhere(m & ~interior)


def _directed(a: np.ndarray, b: np.ndarray, spacing) -> np.ndarray:
    sp = np.asarray(spacing, dtype=np.float64)
    d, _ = cKDTree(b * sp).query(a * sp, k=1)
    return np.asarray(d, dtype=np.float64)


def _surfaces(S, G):
    S, G = _pair(S, G)
    if not S.any() or not G.any():
        raise MetricUndefinedError("surface distance undefined for an empty mask")
    return surface_voxels(S), surface_voxels(G)


def hd95(S, G, spacing=(1.0, 1.0, 1.0)) -> float:
    """Max of the two directed 95th-percentile surface distances (linear interpolation)."""
    a, b = _surfaces(S, G)
    return float(max(np.percentile(_directed(a, b, spacing), 95),
                     np.percentile(_directed(b, a, spacing), 95)))


def asd(S, G, spacing=(1.0, 1.0, 1.0)) -> float:
    a, b = _surfaces(S, G)
    da, db = _directed(a, b, spacing), _directed(b, a, spacing)
    return float((da.sum() + db.sum()) / (len(da) + len(db)))


# -- aggregation --------------------------------------------------------------

def bootstrap_ci(values, level: float = 0.95, resamples: int = 10000, seed: int = 367) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean."""
    x = np.asarray(values, dtype=np.float64)
    if x.size < 2:
        raise ArgumentError("bootstrap needs at least two values")
    rng = np.random.default_rng(seed)
    means = x[rng.integers(0, x.size, size=(resamples, x.size))].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(means, [100 * alpha, 100 * (1 - alpha)])
    # identical samples: keep the exact value rather than a rounded mean
    if np.all(x == x[0]):
        return float(x[0]), float(x[0])
    return float(lo), float(hi)


def evaluate_case(pred, gt, spacing=None, case_id: str = "") -> dict:
    """All six metrics for one case. Undefined metrics become None with a reason.

    Surface distances are in voxel units unless a millimeter ``spacing`` is given.
    """
    sp = (1.0, 1.0, 1.0) if spacing is None else spacing
    row: dict = {"case_id": case_id}
    missing = {}
    fns = {
        "dice": lambda: dice(pred, gt),
        "hd95": lambda: hd95(pred, gt, sp),
        "asd": lambda: asd(pred, gt, sp),
        "acc": lambda: accuracy(pred, gt),
        "pre": lambda: precision(pred, gt),
        "jac": lambda: jaccard(pred, gt),
    }
    for name, fn in fns.items():
        try:
            row[name] = fn()
        except MetricUndefinedError as exc:
            row[name] = None
            missing[name] = str(exc)
    if missing:
        row["missing"] = missing
    return row


@dataclass
class MetricsReport:
    rows: list
    summary: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"summary": self.summary, "cases": self.rows}, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("case_id",) + METRICS)
        for r in self.rows:
            w.writerow([r["case_id"]] + ["" if r.get(m) is None else repr(float(r[m])) for m in METRICS])
        return buf.getvalue()


def evaluate_run(rows: list, level: float = 0.95, resamples: int = 10000, seed: int = 367) -> MetricsReport:
    summary = {}
    for m in METRICS:
        vals = [r[m] for r in rows if r.get(m) is not None]
        entry = {"n": len(vals), "missing": len(rows) - len(vals)}
        if vals:
            entry["mean"] = float(np.mean(vals))
            if len(vals) >= 2:
                entry["ci"] = list(bootstrap_ci(vals, level, resamples, seed))
            else:
                entry["ci"] = [entry["mean"], entry["mean"]]
        summary[m] = entry
    return MetricsReport(rows=list(rows), summary=summary)


def read_metric_csv(text: str, metric: str) -> dict[str, float]:
    if metric not in METRICS:
        raise ArgumentError(f"unknown metric {metric!r}")
    out = {}
    for r in csv.DictReader(io.StringIO(text)):
        if r.get(metric, ""):
            out[r["case_id"]] = float(r[metric])
    return out


# -- Wilcoxon signed-rank -------------------------------------------------------

@dataclass
class WilcoxonResult:
    W: float
    Z: float
    p: float
    n_effective: int
    tie_correction: float

    def as_dict(self) -> dict:
        return {"W": self.W, "Z": self.Z, "p": self.p, "n_effective": self.n_effective,
                "tie_correction": self.tie_correction}


def average_ranks(values) -> tuple[np.ndarray, list[int]]:
    """1-based ranks with ties sharing their mean rank; also the tie-group sizes."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(len(v))
    groups = []
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i: j + 1]] = (i + j) / 2.0 + 1.0
        groups.append(j - i + 1)
        i = j + 1
    return ranks, groups


def wilcoxon(x, y) -> WilcoxonResult:
    """Two-sided signed-rank test, normal approximation with tie correction.

    W is the rank sum of positive differences; zero differences are dropped;
    no continuity correction.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ArgumentError("wilcoxon needs two equal-length 1D samples")
    d = x - y
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise ArgumentError("degenerate sample: all differences are zero")
    ranks, groups = average_ranks(np.abs(d))
    W = float(ranks[d > 0].sum())
    T = sum(t ** 3 - t for t in groups) / 48.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - T
    if var <= 0:
        raise ArgumentError("degenerate sample: zero variance")
    Z = (W - n * (n + 1) / 4.0) / math.sqrt(var)
    p = min(1.0, math.erfc(abs(Z) / math.sqrt(2.0)))
    return WilcoxonResult(W=W, Z=Z, p=p, n_effective=n, tie_correction=T)
