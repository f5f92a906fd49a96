"""Monitoring predictions: max over all windows per variant, bagged combination."""

# std
from __future__ import annotations
from pathlib import Path
from typing import Any
from typing import Dict
from typing import List
from typing import Mapping
from typing import Sequence
import dataclasses
import json
import logging

# lib
import numpy as np
from numpy.typing import NDArray

# pkg
from .ingest import TileId
from .ingest import read_raster
from .ingest import tile_name
from .ingest import write_raster
from .model import ModelParams
from .model import WindowBatch
from .model import forward
from .pipeline import WindowSet
from .workers import map_ordered

log = logging.getLogger(__name__)

COMBINED = "combined"
"""Model name of the bagged combination."""

BATCH = 16
"""Windows per forward pass."""

Raster = NDArray[np.float32]
Predictions = Dict[str, Dict[TileId, Raster]]
"""Rasters by model name and tile."""


@dataclasses.dataclass(eq=False)
class VariantPrediction:
    """Maximum change probability of one model over a tile's windows."""

    model: str
    """Variant id (or `combined`)."""

    tile: TileId
    """Tile coordinates."""

    raster: Raster
    """Values in [0, 1]."""

    windows: int
    """Windows predicted."""


def predict_windows(
    params: ModelParams, windows: WindowSet, batch: int = BATCH
) -> Raster:
    """Per-window predictions `[N][h][w]` in window order (inference mode)."""
    if len(windows) == 0:
        raise ValueError(f"tile {tile_name(windows.tile)}: no windows to predict")
    out = []
    for start in range(0, len(windows), batch):
        stop = min(start + batch, len(windows))
        stacked = WindowBatch.stack([windows.tensor(k) for k in range(start, stop)])
        out.append(forward(params, stacked))
    return np.concatenate(out).astype(np.float32)


def predict_variant(
    params: ModelParams, windows: WindowSet, model: str = "V1", batch: int = BATCH
) -> VariantPrediction:
    """Element-wise maximum of the predictions of every window."""
    preds = predict_windows(params, windows, batch)
    return VariantPrediction(model, windows.tile, preds.max(axis=0), len(preds))


def predict_tiles(
    params: ModelParams,
    windows: Mapping[TileId, WindowSet],
    model: str = "V1",
    threads: int = 1,
) -> Dict[TileId, Raster]:
    """`predict_variant` for every tile (sorted)."""
    tiles = sorted(windows)
    preds = map_ordered(
        lambda t: predict_variant(params, windows[t], model), tiles, threads
    )
    log.info(f"{model}: predicted {len(tiles)} tiles")
    return {p.tile: p.raster for p in preds}


def combine_variants(preds: Sequence[NDArray[Any]]) -> Raster:
    """Geometric mean: the n-th root of the element-wise product of n rasters."""
    if not preds:
        raise ValueError("cannot combine an empty prediction list")
    shapes = {p.shape for p in preds}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")
    product = np.prod(np.stack(preds).astype(np.float64), axis=0)
    return np.power(product, 1.0 / len(preds)).astype(np.float32)


def combine_tiles(
    predictions: Predictions, models: Sequence[str]
) -> Dict[TileId, Raster]:
    """`combine_variants` for every tile predicted by all `models`."""
    if not models:
        raise ValueError("no models to combine")
    missing = [m for m in models if m not in predictions]
    if missing:
        raise ValueError(f"no predictions for models: {', '.join(missing)}")
    tiles = set.intersection(*(set(predictions[m]) for m in models))
    return {
        t: combine_variants([predictions[m][t] for m in models]) for t in sorted(tiles)
    }


def write_predictions(predictions: Predictions, path: Path) -> Path:
    """Write per-tile rasters and the `predictions.json` manifest into `path`."""
    records = []
    for model in sorted(predictions):
        for (y, x), raster in sorted(predictions[model].items()):
            name = f"{model}/pred_{y:03d}_{x:03d}.f32"
            write_raster(path / name, raster)
            height, width = raster.shape
            records.append(
                {
                    "model": model,
                    "tile_y": y,
                    "tile_x": x,
                    "path": name,
                    "height": height,
                    "width": width,
                }
            )
    out = path / "predictions.json"
    out.write_text(json.dumps(records, indent=2))
    log.info(f"write: {out} ({len(records)} rasters)")
    return out


def read_predictions(path: Path) -> Predictions:
    """Read a `predictions.json` manifest (or the directory containing it)."""
    if path.is_dir():
        path = path / "predictions.json"
    try:
        records: List[Dict[str, Any]] = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"corrupt prediction manifest {path}: {e}") from None

    predictions: Predictions = {}
    try:
        for record in records:
            shape = (int(record["height"]), int(record["width"]))
            tile = (int(record["tile_y"]), int(record["tile_x"]))
            raster = read_raster(path.parent / record["path"], shape)
            predictions.setdefault(str(record["model"]), {})[tile] = raster
    except (KeyError, TypeError) as e:
        raise ValueError(f"corrupt prediction manifest {path}: missing {e}") from None
    return predictions
