"""Subcommand implementations."""

# std
from __future__ import annotations
from datetime import datetime
from pathlib import Path
from typing import Callable
from typing import Dict
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

# pkg
from .ablation import AblationGrid
from .ablation import run_ablation
from .ablation import write_ablation
from .args import Args
from .args import RunConfig
from .args import UsageError
from .ensemble import COMBINED
from .ensemble import combine_tiles
from .ensemble import Predictions
from .ensemble import predict_tiles
from .ensemble import predict_windows
from .ensemble import read_predictions
from .ensemble import write_predictions
from .evaluation import score_dataset
from .evaluation import write_metrics
from .evaluation import write_scores
from .ingest import datestr
from .ingest import ObservationSeries
from .ingest import read_bundle
from .ingest import read_labels
from .ingest import TileId
from .ingest import tile_name
from .ingest import write_bundle
from .ingest import write_labels
from .ingest import write_raster
from .model import init_params
from .model import load_checkpoint
from .model import ModelParams
from .model import param_count
from .model import save_checkpoint
from .pipeline import assemble
from .pipeline import mosaic
from .pipeline import Normalizer
from .pipeline import prepare_scene
from .pipeline import temporal_stack
from .pipeline import WindowSet
from .synth import default_scenario
from .synth import generate_labels
from .synth import generate_scene
from .synth import ScenarioSpec
from .transfer import make_folds
from .transfer import TileSample
from .transfer import train_variant
from .transfer import write_folds
from .transfer import write_result

log = logging.getLogger(__name__)

Command = Callable[[Args, RunConfig], None]

BASELINE = "baseline"
"""Model name of the untransferred starting parameters."""


@dataclasses.dataclass(eq=False)
class WindowTrace:
    """Per-window predictions of one model on one tile."""

    starts: List[datetime]
    """Window start timestamps."""

    values: NDArray[np.float32]
    """Predictions `[N][h][w]`."""


def trace_pixels(
    traces: Mapping[str, WindowTrace], pixels: Sequence[Tuple[int, int]]
) -> pd.DataFrame:
    """Prediction time series of tile-local `pixels` for every model."""
    rows = []
    for model, trace in sorted(traces.items()):
        h, w = trace.values.shape[-2:]
        for y, x in pixels:
            if not (0 <= y < h and 0 <= x < w):
                raise ValueError(f"pixel {y}:{x} outside {h}x{w} tile")
            for start, value in zip(trace.starts, trace.values[:, y, x]):
                rows.append(
                    {
                        "model": model,
                        "y": y,
                        "x": x,
                        "window_start": datestr(start),
                        "value": float(value),
                    }
                )
    return pd.DataFrame(rows, columns=["model", "y", "x", "window_start", "value"])


def _output(args: Args, default: Optional[Path] = None) -> Path:
    if args.out:
        return args.out
    if default is None:
        raise UsageError(f"{args.command} requires --out")
    return default


def _stacked(config: RunConfig) -> ObservationSeries:
    config.require("bundle")
    return temporal_stack(read_bundle(Path(config.bundle)))


def _labels(config: RunConfig, dataset: str = "") -> Dict[TileId, NDArray[np.float32]]:
    config.require("labels")
    labels = read_labels(Path(config.labels))
    return {t.tile: t.label for t in labels if not dataset or t.dataset == dataset}


def _variants(args: Args, config: RunConfig) -> List[int]:
    chosen = args.variant or list(range(1, config.variants + 1))
    bad = [k for k in chosen if not 1 <= k <= config.folds]
    if bad:
        raise UsageError(f"variants must be in 1..{config.folds}: {bad}")
    return chosen


def _models(args: Args, config: RunConfig) -> Dict[str, ModelParams]:
    run = Path(config.run_dir)
    models = {
        f"V{k}": load_checkpoint(run / f"V{k}_best") for k in _variants(args, config)
    }
    if args.baseline:
        models[BASELINE] = load_checkpoint(run / BASELINE)
    return models


def _monitored(
    windows: Mapping[TileId, WindowSet], config: RunConfig
) -> Dict[TileId, WindowSet]:
    kept = {}
    for tile, ws in sorted(windows.items()):
        ws = ws.between(*config.monitor())
        if len(ws):
            kept[tile] = ws
        else:
            log.warning(f"tile {tile_name(tile)}: no windows in the monitoring period")
    return kept


def _predict_all(
    models: Mapping[str, ModelParams], windows: Mapping[TileId, WindowSet], threads: int
) -> Predictions:
    predictions: Predictions = {
        name: predict_tiles(params, windows, name, threads)
        for name, params in sorted(models.items())
    }
    variants = sorted(m for m in predictions if m.startswith("V"))
    if len(variants) > 1:
        predictions[COMBINED] = combine_tiles(predictions, variants)
    return predictions


def synth(args: Args, config: RunConfig) -> None:
    """Generate a synthetic bundle, its labels, the scenario and a desk-scale config."""
    out = _output(args)
    spec = ScenarioSpec.load(args.spec) if args.spec else default_scenario(config.seed)
    write_bundle(generate_scene(spec, config.seed), out / "bundle")
    write_labels(generate_labels(spec), out)
    spec.save(out / "scenario.json")
    RunConfig.desk(
        bundle=str(out / "bundle"),
        labels=str(out / "labels.json"),
        run_dir=str(out / "run"),
        seed=config.seed,
        tile_x=spec.tile,
        tile_y=spec.tile,
        center_crop=spec.tile - 2,
    ).save(out / "config.json")


def stack(args: Args, config: RunConfig) -> None:
    """Write the temporally stacked bundle and its normalization."""
    out = _output(args)
    stacked = _stacked(config)
    write_bundle(stacked, out)
    frames = assemble(stacked, config.pipeline())
    log.info(f"assembled {len(frames)} frames")
    Normalizer.fit(frames).save(out / "normalization.json")


def windows(args: Args, config: RunConfig) -> None:
    """Write `windows.csv`: every window of every training tile."""
    out = _output(args, Path(config.run_dir) / "windows.csv")
    prepared = prepare_scene(_stacked(config), config.pipeline())
    rows = [
        {
            "tile_y": ws.tile[0],
            "tile_x": ws.tile[1],
            "start": datestr(w.start),
            "first": w.first,
            "stop": w.stop,
            "frames": len(w),
        }
        for _, ws in sorted(prepared.windows.items())
        for w in ws.windows
    ]
    out.parent.mkdir(parents=True, exist_ok=True)
    columns = ["tile_y", "tile_x", "start", "first", "stop", "frames"]
    pd.DataFrame(rows, columns=columns).to_csv(out, index=False)
    log.info(f"write: {out} ({len(rows)} windows)")


def transfer(args: Args, config: RunConfig) -> None:
    """Train the selected variants on the `trainval` tiles."""
    run = Path(config.run_dir)
    settings = config.transfer()
    variants = _variants(args, config)
    labels = _labels(config, "trainval")
    prepared = prepare_scene(_stacked(config), config.pipeline(), fit_tiles=labels)
    samples = {t: TileSample(prepared.windows[t], label) for t, label in labels.items()}

    config.save(run / "config.json")
    prepared.normalizer.save(run / "normalization.json")
    folds = make_folds(sorted(samples), config.folds, config.seed)
    write_folds(folds, run / "folds.json")

    if args.init:
        initial = load_checkpoint(args.init)
    else:
        initial = init_params(config.seed, config.topology())
    save_checkpoint(initial, run / BASELINE)
    for k in variants:
        result = train_variant(folds[k - 1], samples, settings, initial, config.threads)
        write_result(result, run)


def predict(args: Args, config: RunConfig) -> None:
    """Predict every tile for each model; optionally write full-scene mosaics."""
    run = Path(config.run_dir)
    out = _output(args, run / "predictions")
    normalizer = Normalizer.load(run / "normalization.json")
    models = _models(args, config)
    stacked = _stacked(config)

    prepared = prepare_scene(stacked, config.pipeline(), normalizer)
    windows = _monitored(prepared.windows, config)
    write_predictions(_predict_all(models, windows, config.threads), out)

    if args.mosaic:
        tiled = prepare_scene(stacked, config.pipeline(inference=True), normalizer)
        monitored = _monitored(tiled.windows, config)
        rasters = _predict_all(models, monitored, config.threads)
        for name, tiles in sorted(rasters.items()):
            write_raster(out / f"{name}_mosaic.f32", mosaic(tiled.grid, tiles))
        info = {
            "height": tiled.grid.height,
            "width": tiled.grid.width,
            "models": sorted(rasters),
        }
        (out / "mosaic.json").write_text(json.dumps(info, indent=2))
        log.info(f"write: {out / 'mosaic.json'}")


def combine(args: Args, config: RunConfig) -> None:
    """Add the geometric mean of the variant predictions."""
    source = args.pred or Path(config.run_dir) / "predictions"
    predictions = read_predictions(source)
    if args.variant:
        variants = [f"V{k}" for k in args.variant]
    else:
        variants = sorted(m for m in predictions if m.startswith("V"))
    predictions[COMBINED] = combine_tiles(predictions, variants)
    write_predictions(predictions, _output(args, source))


def evaluate(args: Args, config: RunConfig) -> None:
    """Score every model in a prediction directory; write curves and `metrics.json`."""
    source = args.pred or Path(config.run_dir) / "predictions"
    out = _output(args, source)
    predictions = read_predictions(source)
    labels = _labels(config, args.dataset)
    dataset = args.dataset or "all"
    if args.exclude:
        dataset += "-" + "-".join(tile_name(t).replace(":", "_") for t in args.exclude)
    records = []
    for model, rasters in sorted(predictions.items()):
        scores = score_dataset(rasters, labels, config.center_crop, args.exclude)
        write_scores(scores, out, model, dataset)
        records.append(scores.summary(model, dataset))
        log.info(
            f"{model} {dataset}: "
            f"roc_auc={scores.roc.auc:.4f} pr_auc={scores.pr.auc:.4f}"
        )
    write_metrics(records, out / "metrics.json")


def ablate(args: Args, config: RunConfig) -> None:
    """Score the models under stale resampling of each mode axis."""
    run = Path(config.run_dir)
    out = _output(args, run / "ablation")
    grid = AblationGrid(native=config.delta)
    if args.delta:
        grid.deltas = list(args.delta)
    result = run_ablation(
        grid,
        _stacked(config),
        _labels(config, args.dataset),
        _models(args, config),
        config.pipeline(),
        Normalizer.load(run / "normalization.json"),
        config.center_crop,
        args.exclude,
        config.monitor(),
        config.threads,
    )
    write_ablation(result, out / "ablation.csv")


def trace(args: Args, config: RunConfig) -> None:
    """Write per-window predictions of the `--pixel` scene pixels."""
    if not args.pixel:
        raise UsageError("trace requires at least one --pixel Y:X")
    run = Path(config.run_dir)
    out = _output(args, run / "trace.csv")
    models = _models(args, config)
    normalizer = Normalizer.load(run / "normalization.json")
    prepared = prepare_scene(_stacked(config), config.pipeline(), normalizer)

    by_tile: Dict[TileId, List[Tuple[int, int]]] = {}
    for y, x in args.pixel:
        tile = (y // config.tile_y, x // config.tile_x)
        if tile not in prepared.windows:
            raise ValueError(f"pixel {y}:{x} outside the tiled scene")
        by_tile.setdefault(tile, []).append((y % config.tile_y, x % config.tile_x))

    frames = []
    for tile, pixels in sorted(by_tile.items()):
        ws = prepared.windows[tile].between(*config.monitor())
        traces = {
            name: WindowTrace(ws.starts(), predict_windows(params, ws))
            for name, params in models.items()
        }
        frame = trace_pixels(traces, pixels)
        frame.insert(1, "tile", tile_name(tile))
        frame["y"] += tile[0] * config.tile_y
        frame["x"] += tile[1] * config.tile_x
        frames.append(frame)
    out.parent.mkdir(parents=True, exist_ok=True)
    pd.concat(frames, ignore_index=True).to_csv(out, index=False)
    log.info(f"write: {out}")


def count(args: Args, config: RunConfig) -> None:
    """Print the number of parameters of the configured network."""
    print(param_count(init_params(config.seed, config.topology())), flush=True)


DISPATCH: Dict[str, Command] = {
    "synth": synth,
    "stack": stack,
    "windows": windows,
    "transfer": transfer,
    "predict": predict,
    "combine": combine,
    "eval": evaluate,
    "ablate": ablate,
    "trace": trace,
    "param-count": count,
}
"""Subcommand bodies by name."""
