"""Threshold sweeps: ROC and PR curves with AUC, Cohen's kappa."""

# std
from __future__ import annotations
from enum import Enum
from pathlib import Path
from typing import Any
from typing import Dict
from typing import Iterable
from typing import List
from typing import Mapping
from typing import Optional
from typing import Sequence
from typing import Tuple
import dataclasses
import json
import logging

# lib
import numpy as np
import pandas as pd
from numpy.typing import NDArray
from sklearn import metrics

# pkg
from .ingest import TileId
from .ingest import tile_name

log = logging.getLogger(__name__)

KAPPA_THRESHOLDS = np.linspace(0.0, 1.0, 101)
"""Default kappa threshold grid."""


def center_slices(shape: Tuple[int, ...], size: int) -> Tuple[slice, slice]:
    """Slices of the centered `size`x`size` region of the last two axes.

    >>> center_slices((32, 32), 30)
    (slice(1, 31, None), slice(1, 31, None))
    """
    h, w = shape[-2], shape[-1]
    if size > min(h, w):
        raise ValueError(f"crop {size} larger than raster {h}x{w}")
    y, x = (h - size) // 2, (w - size) // 2
    return slice(y, y + size), slice(x, x + size)


def center_crop(raster: NDArray[Any], size: int) -> NDArray[Any]:
    """Return the centered `size`x`size` region."""
    return raster[(..., *center_slices(raster.shape, size))]


@dataclasses.dataclass(frozen=True)
class ConfusionCounts:
    """Pixel counts of a thresholded prediction against binary labels."""

    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        """Scored pixels."""
        return self.tp + self.fp + self.tn + self.fn

    @property
    def kappa(self) -> float:
        """Cohen's kappa; 0 when chance agreement is perfect.

        >>> ConfusionCounts(tp=40, fp=10, tn=40, fn=10).kappa
        0.6
        """
        counts = [self.tp, self.fp, self.tn, self.fn]
        truth = np.repeat([True, False, False, True], counts)
        predicted = np.repeat([True, True, False, False], counts)
        return _kappa(truth, predicted)


def _kappa(truth: NDArray[np.bool_], positive: NDArray[np.bool_]) -> float:
    if np.array_equal(truth, positive) and (truth.all() or not truth.any()):
        return 0.0  # chance agreement is 1
    return float(metrics.cohen_kappa_score(truth, positive, labels=[False, True]))


def _check(
    pred: NDArray[Any], label: NDArray[Any]
) -> Tuple[NDArray[np.float64], NDArray[np.bool_]]:
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {label.shape}")
    return np.asarray(pred, dtype=np.float64).ravel(), np.asarray(label).ravel() > 0.5


def confusion_at(
    pred: NDArray[Any], label: NDArray[Any], threshold: float
) -> ConfusionCounts:
    """Count pixels with `pred >= threshold` as positive."""
    scores, truth = _check(pred, label)
    matrix = metrics.confusion_matrix(truth, scores >= threshold, labels=[False, True])
    tn, fp, fn, tp = (int(n) for n in matrix.ravel())
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


class CurveKind(str, Enum):
    """Kinds of metric curves."""

    ROC = "roc"
    PR = "pr"
    KAPPA = "kappa"


@dataclasses.dataclass(eq=False)
class MetricsCurve:
    """Points of a threshold sweep, in ascending threshold order.

    ROC: `x` false-positive rate, `y` true-positive rate. PR: `x` recall,
    `y` precision. KAPPA: `x` threshold, `y` kappa. The last ROC and PR point
    (threshold `inf`) predicts no positives.
    """

    kind: CurveKind
    x: NDArray[np.float64]
    y: NDArray[np.float64]
    thresholds: NDArray[np.float64]
    auc: Optional[float] = None

    def peak(self) -> Tuple[float, float]:
        """Return `(threshold, y)` of the largest `y` (lowest threshold on ties)."""
        k = int(np.argmax(self.y))
        return float(self.thresholds[k]), float(self.y[k])

    def frame(self) -> pd.DataFrame:
        """Curve as a table."""
        if self.kind == CurveKind.KAPPA:
            return pd.DataFrame({"threshold": self.thresholds, "kappa": self.y})
        return pd.DataFrame({"x": self.x, "y": self.y, "threshold": self.thresholds})


def roc_curve(pred: NDArray[Any], label: NDArray[Any]) -> MetricsCurve:
    """ROC curve at every distinct score, ending at `(0, 0)`."""
    scores, truth = _check(pred, label)
    if truth.all() or not truth.any():
        raise ValueError("degenerate labels: need positive and negative pixels")
    fpr, tpr, thresholds = metrics.roc_curve(truth, scores, drop_intermediate=False)
    return MetricsCurve(
        CurveKind.ROC,
        fpr[::-1].copy(),
        tpr[::-1].copy(),
        thresholds[::-1].copy(),
        float(metrics.auc(fpr, tpr)),
    )


def pr_curve(pred: NDArray[Any], label: NDArray[Any]) -> MetricsCurve:
    """Precision-recall curve at every distinct score, ending at `(0, 1)`."""
    scores, truth = _check(pred, label)
    if not truth.any():
        raise ValueError("degenerate labels: no positive pixels")
    precision, recall, thresholds = metrics.precision_recall_curve(truth, scores)
    return MetricsCurve(
        CurveKind.PR,
        recall,
        precision,
        np.r_[thresholds, np.inf],
        float(metrics.auc(recall, precision)),
    )


def kappa_sweep(
    pred: NDArray[Any],
    label: NDArray[Any],
    thresholds: Optional[Sequence[float]] = None,
) -> MetricsCurve:
    """Cohen's kappa at each threshold (default: 101 points over [0, 1])."""
    scores, truth = _check(pred, label)
    grid = np.sort(
        np.asarray(KAPPA_THRESHOLDS if thresholds is None else thresholds, np.float64)
    )
    values = [_kappa(truth, scores >= threshold) for threshold in grid]
    return MetricsCurve(CurveKind.KAPPA, grid.copy(), np.array(values), grid.copy())


@dataclasses.dataclass(eq=False)
class Scores:
    """Curves of one model on one dataset."""

    roc: MetricsCurve
    pr: MetricsCurve
    kappa: MetricsCurve
    tiles: List[TileId]
    """Tiles pooled, sorted."""

    pixels: int
    """Pixels pooled."""

    def summary(self, model: str, dataset: str) -> Dict[str, Any]:
        """Return the `metrics.json` record."""
        threshold, kappa = self.kappa.peak()
        return {
            "model": model,
            "dataset": dataset,
            "roc_auc": self.roc.auc,
            "pr_auc": self.pr.auc,
            "kappa_max": kappa,
            "kappa_argmax_threshold": threshold,
            "tiles": len(self.tiles),
            "pixels": self.pixels,
        }


def score_dataset(
    predictions: Mapping[TileId, NDArray[Any]],
    labels: Mapping[TileId, NDArray[Any]],
    crop: int = 30,
    exclude: Iterable[TileId] = (),
    thresholds: Optional[Sequence[float]] = None,
) -> Scores:
    """Pool the center crops of all labeled tiles and sweep thresholds."""
    excluded = set(exclude)
    tiles = sorted(t for t in labels if t not in excluded)
    missing = [tile_name(t) for t in tiles if t not in predictions]
    if missing:
        raise ValueError(f"no prediction for labeled tiles: {', '.join(missing)}")
    if not tiles:
        raise ValueError("no tiles left to score")
    pred = np.concatenate([center_crop(predictions[t], crop).ravel() for t in tiles])
    truth = np.concatenate([center_crop(labels[t], crop).ravel() for t in tiles])
    log.debug(f"scoring {len(tiles)} tiles, {pred.size} pixels")
    return Scores(
        roc_curve(pred, truth),
        pr_curve(pred, truth),
        kappa_sweep(pred, truth, thresholds),
        tiles,
        int(pred.size),
    )


def write_scores(scores: Scores, out_dir: Path, model: str, dataset: str) -> List[Path]:
    """Write `{model}_{dataset}_{roc,pr,kappa}.csv`."""
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for curve in (scores.roc, scores.pr, scores.kappa):
        path = out_dir / f"{model}_{dataset}_{curve.kind.value}.csv"
        curve.frame().to_csv(path, index=False)
        paths.append(path)
    log.info(f"write: {out_dir} ({model}, {dataset})")
    return paths


def write_metrics(records: Sequence[Dict[str, Any]], path: Path) -> Path:
    """Write the `metrics.json` summary."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(list(records), indent=2))
    log.info(f"write: {path}")
    return path
