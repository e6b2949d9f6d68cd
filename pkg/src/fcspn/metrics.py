"""Confusion counting and the three summary scores: OA, AA, Cohen's kappa.

Rows index the reference class, columns the predicted class.  Evaluation
restricts itself to labeled test pixels; training pixels would inflate every
score.  Chance agreement for kappa is computed from exact integer marginal
products so the degenerate p_e = 1 case is detected without float fuzz.
"""

import csv
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np


@dataclass
class ConfusionMatrix:
    """c x c nonnegative counts; counts.sum() is the number of scored pixels."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {counts.shape}")
        if not np.issubdtype(counts.dtype, np.integer):
            rounded = np.rint(counts)
            if not np.array_equal(rounded, counts):
                raise ValueError("confusion counts must be integers")
            counts = rounded
        if counts.min() < 0:
            raise ValueError("confusion counts must be nonnegative")
        self.counts = counts.astype(np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _grid(x) -> np.ndarray:
    return np.asarray(getattr(x, "grid", x))


def confusion(pred, ref, mask=None,
              classes: Optional[int] = None) -> ConfusionMatrix:
    """Count (reference, predicted) pairs over the evaluation pixels.

    ``mask`` may be a SplitMask (its test half is used), a boolean array, or
    None for every labeled reference pixel.  Predictions at scored pixels
    must carry ids in 1..c.
    """
    pred_grid = _grid(pred)
    ref_grid = _grid(ref)
    if pred_grid.shape != ref_grid.shape:
        raise ValueError(
            f"prediction {pred_grid.shape} and reference {ref_grid.shape} disagree")
    if classes is None:
        classes = getattr(ref, "num_classes", None)
    if classes is None:
        classes = int(ref_grid.max())
    scored = ref_grid > 0
    if mask is not None:
        where = np.asarray(getattr(mask, "test", mask), dtype=bool)
        if where.shape != ref_grid.shape:
            raise ValueError(
                f"mask {where.shape} does not match grids {ref_grid.shape}")
        scored &= where
    if not np.any(scored):
        raise ValueError("no pixels selected for evaluation")
    r = ref_grid[scored].astype(np.int64)
    p = pred_grid[scored].astype(np.int64)
    if r.max() > classes:
        raise ValueError(f"reference id {r.max()} exceeds {classes} classes")
    if p.min() < 1 or p.max() > classes:
        raise ValueError(
            f"predicted ids must lie in 1..{classes}, got {p.min()}..{p.max()}")
    counts = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(counts, (r - 1, p - 1), 1)
    return ConfusionMatrix(counts)


def _counts(cm) -> np.ndarray:
    return ConfusionMatrix(getattr(cm, "counts", cm)).counts


def oa(cm) -> float:
    """Overall accuracy: trace over total."""
    counts = _counts(cm)
    total = counts.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(counts) / total)


def per_class_accuracy(cm) -> np.ndarray:
    """Diagonal over row sums (the recall reading of per-class accuracy)."""
    counts = _counts(cm)
    rows = counts.sum(axis=1)
    if np.any(rows == 0):
        missing = int(np.flatnonzero(rows == 0)[0]) + 1
        raise ValueError(f"class {missing} has no reference pixels")
    return np.diag(counts) / rows


def aa(cm) -> float:
    """Average accuracy: unweighted mean of per-class accuracies."""
    return float(per_class_accuracy(cm).mean())


def kappa(cm) -> float:
    """Cohen's kappa: agreement corrected for the chance rate of the marginals."""
    counts = _counts(cm)
    total = int(counts.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    observed = float(np.trace(counts) / total)
    chance_num = int(counts.sum(axis=1) @ counts.sum(axis=0))
    chance_den = total * total
    if chance_num == chance_den:
        if observed == 1.0:
            return 1.0
        raise ValueError("chance agreement is 1 but observed agreement is not")
    expected = chance_num / chance_den
    return float((observed - expected) / (1.0 - expected))


def format_report(cm, class_names: Sequence[str]) -> List[List[str]]:
    """Per-class accuracy rows, then OA, AA, and kappa x 100, all in percent."""
    counts = _counts(cm)
    if len(class_names) != counts.shape[0]:
        raise ValueError(
            f"{len(class_names)} names for {counts.shape[0]} classes")
    rows = [["class", "accuracy"]]
    for name, acc in zip(class_names, per_class_accuracy(counts)):
        rows.append([name, f"{100 * acc:.2f}"])
    rows.append(["OA", f"{100 * oa(counts):.2f}"])
    rows.append(["AA", f"{100 * aa(counts):.2f}"])
    rows.append(["kappa_x100", f"{100 * kappa(counts):.2f}"])
    return rows


def write_report(cm, class_names: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(format_report(cm, class_names))
