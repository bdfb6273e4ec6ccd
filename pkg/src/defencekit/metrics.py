"""Segmentation evaluation: precision/recall, F-measure, adaptive-threshold
binarization, mean absolute error and 256-point PR curves.

Maps are single-channel arrays in [0, 1]; 8-bit values appear only at file
boundaries.  All functions are pure.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError

__all__ = [
    "precision_recall",
    "f_measure",
    "adaptive_threshold",
    "mae",
    "pr_curve",
    "dataset_report",
    "DatasetReport",
]


def _require_same_shape(b, g, what):
    if b.shape != g.shape:
        raise ShapeError(f"{what}: shapes differ, {b.shape} vs {g.shape}")


def precision_recall(b: np.ndarray, g: np.ndarray) -> tuple[float, float]:
    """Counting precision/recall between binary maps.

    Empty-map conventions: an empty prediction has precision 1 (no false
    positives) and recall 0 against a nonempty truth; two empty maps score
    (1, 1).
    """
    b = np.asarray(b)
    g = np.asarray(g)
    _require_same_shape(b, g, "precision_recall")
    bm = b != 0
    gm = g != 0
    inter = int(np.logical_and(bm, gm).sum())
    nb = int(bm.sum())
    ng = int(gm.sum())
    precision = 1.0 if nb == 0 else inter / nb
    recall = 1.0 if ng == 0 else inter / ng
    return precision, recall


def f_measure(precision: float, recall: float, beta_sq: float = 0.3) -> float:
    """(1 + b^2) P R / (b^2 P + R); returns 0 when both inputs are 0."""
    if precision == 0.0 and recall == 0.0:
        return 0.0
    return (1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall)


def adaptive_threshold(b: np.ndarray, k: float = 1.0) -> np.ndarray:
    """Binarize at k times the map mean; strictly-greater comparison, so a
    constant map binarizes to all zeros."""
    b = np.asarray(b, dtype=np.float64)
    t = k * float(b.mean())
    return (b > t).astype(np.float64)


def mae(b: np.ndarray, g: np.ndarray) -> float:
    b = np.asarray(b, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    _require_same_shape(b, g, "mae")
    return float(np.abs(b - g).mean())


def pr_curve(b: np.ndarray, g: np.ndarray) -> list[tuple[float, float]]:
    """Precision/recall at thresholds t/255 for t in 0..255 (binarize at
    value > t/255).  Recall is non-increasing in t."""
    b = np.asarray(b, dtype=np.float64)
    g = np.asarray(g)
    _require_same_shape(b, g, "pr_curve")
    return [precision_recall(b > (t / 255.0), g) for t in range(256)]


class DatasetReport:
    """Aggregate metrics over (path, prediction, truth) records."""

    def __init__(self, rows, mean_precision, mean_recall, mean_f, mean_mae, curve):
        self.rows = rows                    # list of (path, p, r, f, mae)
        self.mean_precision = mean_precision
        self.mean_recall = mean_recall
        self.mean_f = mean_f
        self.mean_mae = mean_mae
        self.curve = curve                  # 256 (precision, recall) pairs

    def write(self, report_path, curve_path=None) -> None:
        lines = [f"{path},{p:.6f},{r:.6f},{f:.6f},{m:.6f}"
                 for path, p, r, f, m in self.rows]
        lines.append(f"AGGREGATE,{self.mean_precision:.6f},{self.mean_recall:.6f},"
                     f"{self.mean_f:.6f},{self.mean_mae:.6f}")
        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        if curve_path is not None:
            with open(curve_path, "w", encoding="utf-8") as fh:
                for t, (p, r) in enumerate(self.curve):
                    fh.write(f"{t},{p:.6f},{r:.6f}\n")


def dataset_report(entries, outputs, k: float = 1.0) -> DatasetReport:
    """Per-image metrics (adaptive-threshold binarization) averaged
    arithmetically, plus the mean PR curve over the dataset.

    `entries` is a sequence of (path, ground truth) pairs and `outputs` maps
    path -> predicted fence map; a missing output is an error.
    """
    rows = []
    curves = []
    for path, truth in entries:
        if path not in outputs:
            raise KeyError(f"no model output for manifest entry {path!r}")
        pred = np.asarray(outputs[path], dtype=np.float64)
        binary = adaptive_threshold(pred, k)
        p, r = precision_recall(binary, truth)
        rows.append((path, p, r, f_measure(p, r), mae(pred, truth)))
        curves.append(pr_curve(pred, truth))
    if not rows:
        raise ValueError("dataset_report needs at least one entry")
    mean_of = lambda i: float(np.mean([row[i] for row in rows]))
    curve = [
        (float(np.mean([c[t][0] for c in curves])),
         float(np.mean([c[t][1] for c in curves])))
        for t in range(256)
    ]
    return DatasetReport(rows, mean_of(1), mean_of(2), mean_of(3), mean_of(4), curve)
