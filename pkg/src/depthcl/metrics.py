"""Per-frame depth metrics and sequence-level forgetting metrics.

Frame metrics are MAE/RMSE on meter residuals reported in millimeters
and iMAE/iRMSE on inverse-depth residuals reported in 1/km. Sequence
metrics operate on a lower-triangular record whose entry (j, k) holds a
frame metric on dataset j evaluated after training step k.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, EmptyMaskError, UndefinedMetricError

METRIC_NAMES = ("mae", "rmse", "imae", "irmse")
RECORD_FORMAT_VERSION = 1


@dataclass(frozen=True)
class RangeCap:
    min_depth: float
    max_depth: float

    def __post_init__(self):
        if not (0 < self.min_depth < self.max_depth):
            raise ContractError("need 0 < min_depth < max_depth")


@dataclass(frozen=True)
class FrameMetrics:
    mae: float     # mm
    rmse: float    # mm
    imae: float    # 1/km
    irmse: float   # 1/km

    def as_dict(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "imae": self.imae, "irmse": self.irmse}


def frame_metrics(pred: np.ndarray, truth: np.ndarray, cap: RangeCap) -> FrameMetrics:
    """Metrics over pixels where truth is valid (>0) and inside the cap."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ContractError("pred/truth shape mismatch")
    mask = (truth > 0) & (truth >= cap.min_depth) & (truth <= cap.max_depth)
    if not mask.any():
        raise EmptyMaskError("no valid ground-truth points inside the range cap")
    p = pred[mask]
    t = truth[mask]
    if np.any(p <= 0):
        raise ContractError("predictions must be positive for inverse-depth metrics")
    res = p - t
    ires = 1.0 / p - 1.0 / t
    return FrameMetrics(
        mae=float(np.mean(np.abs(res)) * 1000.0),
        rmse=float(np.sqrt(np.mean(res ** 2)) * 1000.0),
        imae=float(np.mean(np.abs(ires)) * 1000.0),
        irmse=float(np.sqrt(np.mean(ires ** 2)) * 1000.0),
    )


# ---------------------------------------------------------------------------
# sequence metrics over a lower-triangular value matrix
# ---------------------------------------------------------------------------


def _check_record_matrix(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ContractError("record matrix must be square")
    n = values.shape[0]
    populated = values[np.triu_indices(n)]  # entries (j, k) with j <= k
    if not np.all(np.isfinite(populated)):
        raise ContractError("record has unpopulated or non-finite entries below the training step")
    return values


def avg_forgetting(values: np.ndarray) -> float:
    """Mean relative error increase on past datasets, in percent.

    (2 / (N (N-1))) * sum_{k} sum_{j<k} (a[j,k] - a[j,j]) / a[j,j] * 100.
    Negative values are legitimate (backward transfer).
    """
    values = _check_record_matrix(values)
    n = values.shape[0]
    if n < 2:
        raise UndefinedMetricError("average forgetting needs at least 2 datasets")
    diag = np.diag(values)
    if np.any(diag <= 0):
        raise ContractError("diagonal entries must be positive")
    total = 0.0
    for k in range(n):
        for j in range(k):
            total += (values[j, k] - values[j, j]) / values[j, j]
    return 100.0 * 2.0 * total / (n * (n - 1))


def avg_performance(values: np.ndarray) -> float:
    """Mean of all populated entries: (2 / (N (N+1))) * sum_{j<=k} a[j,k]."""
    values = _check_record_matrix(values)
    n = values.shape[0]
    total = 0.0
    for k in range(n):
        for j in range(k + 1):
            total += values[j, k]
    return 2.0 * total / (n * (n + 1))


def spto(values: np.ndarray, normalization: str = "mean") -> float:
    """Harmonic mean of stability S (final column) and plasticity P (diagonal).

    S = sum_k a[k, N-1], P = sum_k a[k, k]; with normalization="mean"
    both are divided by N before combining.
    """
    values = _check_record_matrix(values)
    if normalization not in ("sum", "mean"):
        raise ContractError(f"unknown spto normalization {normalization!r}")
    n = values.shape[0]
    s = float(values[:, n - 1].sum())
    p = float(np.diag(values).sum())
    if normalization == "mean":
        s /= n
        p /= n
    if s <= 0 or p <= 0:
        raise UndefinedMetricError("SPTO requires positive stability and plasticity sums")
    return 2.0 * s * p / (s + p)


# ---------------------------------------------------------------------------
# record container
# ---------------------------------------------------------------------------


class EvalRecord:
    """Lower-triangular (dataset j, training step k) values per frame metric."""

    def __init__(self, n: int, metric_names=METRIC_NAMES):
        if n < 1:
            raise ContractError("record needs at least one dataset")
        self.n = n
        self.metric_names = tuple(metric_names)
        self.values = {m: np.full((n, n), np.nan) for m in self.metric_names}

    def set_entry(self, metric: str, j: int, k: int, value: float) -> None:
        if j > k:
            raise ContractError("only j <= k entries exist in the record")
        if not np.isfinite(value):
            raise ContractError("record entries must be finite")
        self.values[metric][j, k] = value

    def get(self, metric: str, j: int, k: int) -> float:
        return float(self.values[metric][j, k])

    def entry_count(self, metric: str = "mae") -> int:
        return int(np.isfinite(self.values[metric][np.triu_indices(self.n)]).sum())

    def complete_through(self, k: int) -> bool:
        for m in self.metric_names:
            for kk in range(k + 1):
                for j in range(kk + 1):
                    if not np.isfinite(self.values[m][j, kk]):
                        return False
        return True

    def matrix(self, metric: str) -> np.ndarray:
        """Lower-triangular matrix in (j, k) orientation for the metric functions."""
        return self.values[metric].copy()

    def summary(self, spto_normalization: str = "mean") -> dict:
        out = {}
        for m in self.metric_names:
            mat = self.values[m]
            entry = {"avg_performance": avg_performance(mat),
                     "spto": spto(mat, spto_normalization)}
            entry["avg_forgetting"] = avg_forgetting(mat) if self.n >= 2 else None
            out[m] = entry
        return out

    # persistence: versioned tabular file, one row per (metric, j, k, value)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["record_version", RECORD_FORMAT_VERSION, "n", self.n])
            writer.writerow(["metric", "dataset_j", "step_k", "value"])
            for m in self.metric_names:
                for k in range(self.n):
                    for j in range(k + 1):
                        v = self.values[m][j, k]
                        if np.isfinite(v):
                            writer.writerow([m, j, k, repr(float(v))])

    @classmethod
    def load_csv(cls, path) -> "EvalRecord":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            head = next(reader)
            if head[0] != "record_version" or int(head[1]) != RECORD_FORMAT_VERSION:
                raise ContractError(f"unsupported record version in {path}")
            n = int(head[3])
            next(reader)  # column header
            rec = cls(n)
            for m, j, k, v in reader:
                rec.set_entry(m, int(j), int(k), float(v))
        return rec
