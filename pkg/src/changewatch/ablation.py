"""Observation-frequency ablation: stale resampling per mode, then predict and score."""

# std
from __future__ import annotations
from datetime import datetime
from pathlib import Path
from typing import Dict
from typing import List
from typing import Mapping
from typing import Optional
from typing import Sequence
from typing import Tuple
import dataclasses
import logging

# lib
import numpy as np
import pandas as pd
from numpy.typing import NDArray

# pkg
from .ensemble import COMBINED
from .ensemble import combine_tiles
from .ensemble import predict_tiles
from .ensemble import Predictions
from .evaluation import Scores
from .evaluation import score_dataset
from .ingest import ObservationSeries
from .ingest import TileId
from .ingest import tile_name
from .model import ModelParams
from .pipeline import Days
from .pipeline import days_str
from .pipeline import INF
from .pipeline import Normalizer
from .pipeline import PipelineParams
from .pipeline import prepare_scene
from .pipeline import stale_resample

log = logging.getLogger(__name__)

AXES = ("sar", "opt", "both")
"""Which modes are resampled."""

COLUMNS = [
    "mode_axis",
    "delta_days",
    "model",
    "roc_auc",
    "pr_auc",
    "kappa_max",
    "kappa_argmax",
]
"""Columns of `ablation.csv`."""

Cell = Tuple[str, Days]


@dataclasses.dataclass
class AblationGrid:
    """Resampling steps and mode axes to evaluate."""

    deltas: List[Days] = dataclasses.field(default_factory=lambda: [120, 600, INF])
    """Steps in days (`INF` freezes a mode at its first observation)."""

    axes: List[str] = dataclasses.field(default_factory=lambda: list(AXES))
    """Mode axes."""

    native: Days = 2
    """Native sampling step; always evaluated as the reference."""

    def cells(self) -> List[Cell]:
        """`(axis, delta)` pairs; the native step appears once, as `both`."""
        unknown = [a for a in self.axes if a not in AXES]
        if unknown:
            raise ValueError(f"unknown mode axes: {', '.join(unknown)}")
        cells: List[Cell] = [("both", self.native)]
        for axis in self.axes:
            cells.extend((axis, d) for d in self.deltas if d != self.native)
        return cells

    def resample(self, stacked: ObservationSeries, cell: Cell) -> ObservationSeries:
        """Hold the values of the cell's modes for `delta` days; others stay as is."""
        axis, delta = cell
        delta_sar = delta if axis in ("sar", "both") else 0
        delta_opt = delta if axis in ("opt", "both") else 0
        return stale_resample(stacked, delta_sar=delta_sar, delta_opt=delta_opt)


@dataclasses.dataclass(eq=False)
class AblationResult:
    """Scores per cell and model."""

    scores: Dict[Tuple[str, Days, str], Scores] = dataclasses.field(
        default_factory=dict
    )
    """Scores keyed by `(axis, delta, model)`."""

    def frame(self) -> pd.DataFrame:
        """Result table (`ablation.csv`)."""
        rows = []
        for (axis, delta, model), scores in self.scores.items():
            threshold, kappa = scores.kappa.peak()
            rows.append(
                {
                    "mode_axis": axis,
                    "delta_days": days_str(delta),
                    "model": model,
                    "roc_auc": scores.roc.auc,
                    "pr_auc": scores.pr.auc,
                    "kappa_max": kappa,
                    "kappa_argmax": threshold,
                }
            )
        return pd.DataFrame(rows, columns=COLUMNS)

    def auc(self, axis: str, delta: Days, model: str = COMBINED) -> float:
        """ROC AUC of one cell."""
        value = self.scores[(axis, delta, model)].roc.auc
        return float("nan") if value is None else value


def run_ablation(
    grid: AblationGrid,
    stacked: ObservationSeries,
    labels: Mapping[TileId, NDArray[np.float32]],
    models: Mapping[str, ModelParams],
    params: PipelineParams,
    normalizer: Optional[Normalizer] = None,
    crop: int = 30,
    exclude: Sequence[TileId] = (),
    monitor: Tuple[Optional[datetime], Optional[datetime]] = (None, None),
    threads: int = 1,
) -> AblationResult:
    """Score every model on every cell of `grid`.

    `stacked` is the temporally stacked series. Models named `V*` are also
    combined. Every cell must keep the reference cell's window sizes.
    """
    variants = sorted(m for m in models if m.startswith("V"))
    result = AblationResult()
    reference: Optional[Dict[TileId, List[int]]] = None
    for cell in grid.cells():
        axis, delta = cell
        prepared = prepare_scene(grid.resample(stacked, cell), params, normalizer)
        normalizer = normalizer or prepared.normalizer
        windows = {
            t: prepared.windows[t].between(*monitor)
            for t in labels
            if t in prepared.windows
        }
        sizes = {t: [len(w) for w in ws.windows] for t, ws in sorted(windows.items())}
        if reference is None:
            reference = sizes
        elif sizes != reference:
            changed = [tile_name(t) for t in sizes if sizes[t] != reference.get(t)]
            raise ValueError(
                f"cell {axis}/{days_str(delta)} changed window sizes "
                f"in tiles {', '.join(changed)}"
            )

        predictions: Predictions = {
            name: predict_tiles(p, windows, name, threads)
            for name, p in sorted(models.items())
        }
        if len(variants) > 1:
            predictions[COMBINED] = combine_tiles(predictions, variants)
        for model, rasters in predictions.items():
            scores = score_dataset(rasters, labels, crop, exclude)
            result.scores[(axis, delta, model)] = scores
            log.info(
                f"{axis} delta={days_str(delta)} {model}: "
                f"roc_auc={scores.roc.auc:.4f} pr_auc={scores.pr.auc:.4f}"
            )
    return result


def write_ablation(result: AblationResult, path: Path) -> Path:
    """Write `ablation.csv`."""
    path.parent.mkdir(parents=True, exist_ok=True)
    result.frame().to_csv(path, index=False)
    log.info(f"write: {path}")
    return path
