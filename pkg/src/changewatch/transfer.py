"""Transfer training: window selection, augmentation, loss, folds and SGD."""

# std
from __future__ import annotations
from pathlib import Path
from typing import Any
from typing import Dict
from typing import Iterator
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
import dataclasses
import json
import logging
import math

# lib
import numpy as np
import pandas as pd
from numpy.typing import NDArray

# pkg
from .evaluation import center_slices
from .ingest import TileId
from .ingest import parse_tile
from .ingest import tile_name
from .layers import Array
from .model import ModelParams
from .model import WindowBatch
from .model import backward
from .model import forward
from .model import forward_with_context
from .model import init_params
from .model import save_checkpoint
from .pipeline import WindowSet
from .workers import map_ordered

log = logging.getLogger(__name__)

EPSILON = 1e-7
"""Smoothing term of the Tanimoto coefficient."""

# seed stream purposes
SHUFFLE, SELECT, AUGMENT, DROPOUT, VALIDATE = range(5)


@dataclasses.dataclass
class TransferConfig:
    """Training hyperparameters."""

    learning_rate: float = 0.008
    """SGD step size."""

    momentum: float = 0.8
    """SGD momentum."""

    epochs: int = 160
    """Number of epochs."""

    batch_size: int = 64
    """Tiles per optimizer step."""

    windows_per_tile: int = 10
    """Windows selected per tile and epoch."""

    first_window: int = 21
    """Index of the first selected window."""

    offset_min: int = 40
    """Smallest offset between consecutive selected windows."""

    offset_max: int = 49
    """Largest offset between consecutive selected windows."""

    center_crop: int = 30
    """Side of the center region the loss is computed on."""

    seed: int = 0
    """Seed for initialization, shuffling, selection, augmentation and dropout."""

    @staticmethod
    def desk(**changes: Any) -> TransferConfig:
        """Settings sized for the synthetic 730-day scenario."""
        values: Dict[str, Any] = dict(
            batch_size=8, epochs=60, offset_min=20, offset_max=24
        )
        values.update(changes)
        return TransferConfig(**values)

    @property
    def required_windows(self) -> int:
        """Windows a tile needs so that any offset draw fits."""
        return self.first_window + (self.windows_per_tile - 1) * self.offset_max + 1

    def find_issues(self, tile: Optional[Tuple[int, int]] = None) -> List[str]:
        """Return a description of every violated invariant."""
        issues = []
        if self.learning_rate < 0:
            issues.append(f"learning_rate must be >= 0: {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            issues.append(f"momentum must be in [0, 1): {self.momentum}")
        if self.epochs < 1 or self.batch_size < 1 or self.windows_per_tile < 1:
            issues.append("epochs, batch_size and windows_per_tile must be >= 1")
        if self.first_window < 0:
            issues.append(f"first_window must be >= 0: {self.first_window}")
        if not 0 < self.offset_min <= self.offset_max:
            issues.append(f"bad offset range: [{self.offset_min}, {self.offset_max}]")
        if tile is not None and tile != (self.center_crop + 2, self.center_crop + 2):
            issues.append(f"center_crop {self.center_crop} must be tile - 2 for {tile}")
        return issues

    def check(self, tile: Optional[Tuple[int, int]] = None) -> TransferConfig:
        """Raise `ValueError` if any invariant is violated."""
        issues = self.find_issues(tile)
        if issues:
            raise ValueError("invalid transfer config: " + "; ".join(issues))
        return self

    def asdict(self) -> Dict[str, Any]:
        """Return `dict` representation."""
        return dataclasses.asdict(self)


@dataclasses.dataclass
class FoldSplit:
    """Training and validation tiles of one transfer variant."""

    variant: str
    """Variant id (`V1`, `V2`, ...)."""

    train: List[TileId]
    """Training tiles."""

    validation: List[TileId]
    """Validation tiles (disjoint from every other variant's)."""

    @property
    def number(self) -> int:
        """1-based variant number."""
        return int(self.variant[1:])

    def asdict(self) -> Dict[str, Any]:
        """Return `dict` representation."""
        return {
            "variant": self.variant,
            "train": [tile_name(t) for t in self.train],
            "validation": [tile_name(t) for t in self.validation],
        }

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> FoldSplit:
        """Return fold from a `dict`."""
        return FoldSplit(
            str(data["variant"]),
            [parse_tile(t) for t in data["train"]],
            [parse_tile(t) for t in data["validation"]],
        )


def make_folds(
    tile_ids: Sequence[TileId], k: int = 4, seed: int = 0
) -> List[FoldSplit]:
    """Split tiles into `k` variants with disjoint validation sets.

    Validation set sizes differ by at most one; the larger ones come first.
    """
    if k < 1 or k > len(tile_ids):
        raise ValueError(f"cannot make {k} folds from {len(tile_ids)} tiles")
    tiles = sorted(tile_ids)
    rng = np.random.default_rng(np.random.SeedSequence([seed, SHUFFLE]))
    order = rng.permutation(len(tiles))
    folds = []
    for number, part in enumerate(np.array_split(order, k), start=1):
        chosen = set(int(p) for p in part)
        validation = [tiles[p] for p in sorted(chosen)]
        train = [t for p, t in enumerate(tiles) if p not in chosen]
        folds.append(FoldSplit(f"V{number}", train, validation))
    return folds


def write_folds(folds: Sequence[FoldSplit], path: Path) -> Path:
    """Write `folds.json`."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([f.asdict() for f in folds], indent=2))
    log.info(f"write: {path}")
    return path


def read_folds(path: Path) -> List[FoldSplit]:
    """Read `folds.json`."""
    try:
        return [FoldSplit.from_dict(d) for d in json.loads(path.read_text())]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise ValueError(f"corrupt folds file {path}: {e}") from None


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def select_windows(
    windows: WindowSet, config: TransferConfig, seed: Sequence[int]
) -> List[int]:
    """Pick `windows_per_tile` partially overlapping windows.

    The first index is `first_window`; each next one follows after a uniform
    random offset in `[offset_min, offset_max]` drawn from `seed`.
    """
    required = config.required_windows
    if len(windows) < required:
        raise ValueError(
            f"tile {tile_name(windows.tile)}: {len(windows)} windows, "
            f"need at least {required} (first_window + (n - 1) * offset_max + 1)"
        )
    rng = _rng(*seed)
    offsets = rng.integers(
        config.offset_min, config.offset_max + 1, size=config.windows_per_tile - 1
    )
    starts = config.first_window + np.concatenate([[0], np.cumsum(offsets)])
    return [int(s) for s in starts]


def max_pool_over_time(predictions: Sequence[Array]) -> Array:
    """Element-wise maximum over per-window predictions."""
    if len(predictions) == 0:
        raise ValueError("cannot pool an empty prediction list")
    return np.max(np.stack(predictions), axis=0)


def max_pool_grad(predictions: Sequence[Array], upstream: Array) -> Array:
    """Route `upstream` to the window holding each pixel's maximum.

    Ties go to the lowest window index.
    """
    stacked = np.stack(predictions)
    winner = np.argmax(stacked, axis=0)
    grad = np.zeros_like(stacked, dtype=np.result_type(stacked, upstream))
    np.put_along_axis(grad, winner[None], np.asarray(upstream)[None], axis=0)
    return grad


def _tanimoto(
    p: NDArray[np.float64], label: NDArray[np.float64]
) -> Tuple[float, NDArray[np.float64]]:
    """Tanimoto coefficient and its gradient w.r.t. `p`."""
    a = float(np.sum(p * label)) + EPSILON
    b = float(np.sum(p * p) + np.sum(label * label) - np.sum(p * label)) + EPSILON
    return a / b, (label * b - a * (2 * p - label)) / (b * b)


def tanimoto_complement_loss(
    pred: Array, label: Array
) -> Tuple[float, NDArray[np.float64]]:
    """Return `1 - (T(p, l) + T(1 - p, 1 - l)) / 2` and its gradient w.r.t. `pred`."""
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {label.shape}")
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    t1, g1 = _tanimoto(p, y)
    t2, g2 = _tanimoto(1 - p, 1 - y)
    return 1 - 0.5 * (t1 + t2), -0.5 * (g1 - g2)


@dataclasses.dataclass(frozen=True)
class Augmentation:
    """One of the 16 sample transforms."""

    flip: bool = False
    """Mirror horizontally."""

    rotation: int = 0
    """Quarter turns counter-clockwise (applied after the flip)."""

    comb: bool = False
    """Drop every second valid frame, keeping the latest."""

    @property
    def tag(self) -> str:
        """Short name, e.g. `f1r3c0`."""
        return f"f{int(self.flip)}r{self.rotation % 4}c{int(self.comb)}"


def augmentations() -> List[Augmentation]:
    """All 16 transforms (identity first)."""
    return [
        Augmentation(bool(f), r, bool(c))
        for c in (0, 1)
        for f in (0, 1)
        for r in range(4)
    ]


def transform_raster(raster: Array, aug: Augmentation) -> Array:
    """Apply the spatial part of `aug` over the last two axes."""
    out = np.flip(raster, axis=-1) if aug.flip else raster
    return np.ascontiguousarray(np.rot90(out, aug.rotation % 4, axes=(-2, -1)))


def comb_filter(validity: NDArray[np.bool_]) -> NDArray[np.bool_]:
    """Invalidate every second valid frame per window, counting from the latest."""
    out = validity.copy()
    for row in out.reshape(-1, out.shape[-1]):
        valid = np.flatnonzero(row)
        row[valid[::-1][1::2]] = False
    return out


def apply_augmentation(
    batch: WindowBatch, label: Array, aug: Augmentation
) -> Tuple[WindowBatch, Array]:
    """Transform every frame and the label alike; the comb touches frames only."""
    frames = transform_raster(batch.frames, aug)
    validity = comb_filter(batch.validity) if aug.comb else batch.validity.copy()
    return WindowBatch(frames, validity), transform_raster(label, aug)


def augment_sample(
    batch: WindowBatch, label: Array, seed: Sequence[int]
) -> Tuple[WindowBatch, Array, Augmentation]:
    """Apply one of the 16 transforms picked by `seed`."""
    choices = augmentations()
    aug = choices[int(_rng(*seed).integers(len(choices)))]
    batch, label = apply_augmentation(batch, label, aug)
    return batch, label, aug


@dataclasses.dataclass
class Momentum:
    """SGD with momentum: `v = m v - lr g`, `theta = theta + v`."""

    learning_rate: float
    momentum: float
    velocity: Dict[str, Array] = dataclasses.field(default_factory=dict)

    def step(self, params: ModelParams, grads: Dict[str, Array]) -> None:
        """Update `params` in place."""
        for name, grad in grads.items():
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(grad)
            v = self.momentum * v - self.learning_rate * grad
            self.velocity[name] = v
            params.tensors[name] = (params.tensors[name] + v).astype(params.dtype)


@dataclasses.dataclass(eq=False)
class TileSample:
    """Windows of a training tile and its label."""

    windows: WindowSet
    """All windows of the tile."""

    label: NDArray[np.float32]
    """Binary ground truth."""

    @property
    def tile(self) -> TileId:
        """Tile coordinates."""
        return self.windows.tile


@dataclasses.dataclass
class EpochRecord:
    """Losses after one epoch."""

    epoch: int
    train_loss: float
    val_loss: float


@dataclasses.dataclass(eq=False)
class TrainResult:
    """Outcome of training one variant."""

    variant: str
    """Variant id."""

    best: ModelParams
    """Parameters of the epoch with the lowest validation loss."""

    last: ModelParams
    """Parameters after the final epoch."""

    best_epoch: int
    """1-based epoch of `best`."""

    trace: List[EpochRecord]
    """Per-epoch losses."""

    def trace_frame(self) -> pd.DataFrame:
        """Trace as a table (`epoch`, `train_loss`, `val_loss`)."""
        return pd.DataFrame(
            [dataclasses.asdict(r) for r in self.trace],
            columns=["epoch", "train_loss", "val_loss"],
        )


def _selected(sample: TileSample, indexes: Sequence[int]) -> WindowBatch:
    return WindowBatch.stack([sample.windows.tensor(k) for k in indexes])


def tile_gradient(
    params: ModelParams,
    sample: TileSample,
    config: TransferConfig,
    entropy: Sequence[int],
) -> Tuple[float, Dict[str, Array]]:
    """Loss and parameter gradients of one augmented, max-pooled tile sample.

    The selected windows are predicted in one pass; only windows that win the
    max pooling somewhere in the center crop are run again with a backward
    context, with the same dropout masks.
    """
    i, j = sample.tile
    indexes = select_windows(sample.windows, config, [*entropy, i, j, SELECT])
    batch, label, _ = augment_sample(
        _selected(sample, indexes), sample.label, [*entropy, i, j, AUGMENT]
    )
    dropout = np.random.SeedSequence([*entropy, i, j, DROPOUT])
    seeds = [int(s) for s in dropout.generate_state(len(batch))]
    preds = forward(params, batch, training=True, dropout_seed=seeds)

    crop = center_slices(label.shape, config.center_crop)
    loss, dloss = tanimoto_complement_loss(
        max_pool_over_time(list(preds))[crop], label[crop]
    )
    upstream = np.zeros(label.shape, dtype=np.float64)
    upstream[crop] = dloss
    routed = max_pool_grad(list(preds), upstream)

    grads = {name: np.zeros_like(t) for name, t in params.tensors.items()}
    for k in np.flatnonzero(np.any(routed != 0, axis=(1, 2))):
        single = WindowBatch(batch.frames[k : k + 1], batch.validity[k : k + 1])
        _, context = forward_with_context(params, single, True, [seeds[k]])
        for name, grad in backward(params, context, routed[k : k + 1]).items():
            grads[name] += grad
    return loss, grads


def tile_loss(
    params: ModelParams,
    sample: TileSample,
    config: TransferConfig,
    entropy: Sequence[int],
) -> float:
    """Validation loss of one tile: fixed selection, no augmentation or dropout."""
    i, j = sample.tile
    indexes = select_windows(sample.windows, config, [*entropy, i, j, VALIDATE])
    preds = forward(params, _selected(sample, indexes))
    crop = center_slices(sample.label.shape, config.center_crop)
    loss, _ = tanimoto_complement_loss(
        max_pool_over_time(list(preds))[crop], sample.label[crop]
    )
    return loss


def _batches(items: Sequence[TileId], size: int) -> Iterator[List[TileId]]:
    for start in range(0, len(items), size):
        yield list(items[start : start + size])


def validation_loss(
    params: ModelParams,
    samples: Dict[TileId, TileSample],
    tiles: Sequence[TileId],
    config: TransferConfig,
    threads: int = 1,
) -> float:
    """Mean loss over `tiles` (nan if there are none)."""
    if not tiles:
        return math.nan
    losses = map_ordered(
        lambda t: tile_loss(params, samples[t], config, [config.seed]), tiles, threads
    )
    return float(np.mean(losses))


def train_variant(
    fold: FoldSplit,
    samples: Dict[TileId, TileSample],
    config: TransferConfig,
    initial: Optional[ModelParams] = None,
    threads: int = 1,
) -> TrainResult:
    """Train one variant on its fold and keep the best epoch by validation loss.

    Without validation tiles the training loss selects the best epoch.
    """
    missing = [tile_name(t) for t in fold.train + fold.validation if t not in samples]
    if missing:
        raise ValueError(f"{fold.variant}: no samples for tiles {', '.join(missing)}")
    if not fold.train:
        raise ValueError(f"{fold.variant}: no training tiles")
    config.check(samples[fold.train[0]].label.shape)

    params = (initial or init_params(config.seed)).copy()
    optimizer = Momentum(config.learning_rate, config.momentum)
    trace: List[EpochRecord] = []
    best, best_epoch, best_score = params.copy(), 0, math.inf
    for epoch in range(1, config.epochs + 1):
        rng = _rng(config.seed, fold.number, epoch, SHUFFLE)
        order = rng.permutation(len(fold.train))
        tiles = [fold.train[int(k)] for k in order]
        losses = []
        for batch in _batches(tiles, config.batch_size):
            entropy = [config.seed, fold.number, epoch]
            results = map_ordered(
                lambda t: tile_gradient(params, samples[t], config, entropy),
                batch,
                threads,
            )
            total = {name: np.zeros_like(t) for name, t in params.tensors.items()}
            for tile, (loss, grads) in zip(batch, results):
                if not math.isfinite(loss):
                    raise RuntimeError(
                        f"{fold.variant}: non-finite loss {loss} at epoch {epoch}, "
                        f"tile {tile_name(tile)}"
                    )
                losses.append(loss)
                for name, grad in grads.items():
                    total[name] += grad
            optimizer.step(params, {k: g / len(batch) for k, g in total.items()})
            log.debug(f"{fold.variant} epoch {epoch}: batch of {len(batch)} tiles")

        train_loss = float(np.mean(losses))
        val_loss = validation_loss(params, samples, fold.validation, config, threads)
        trace.append(EpochRecord(epoch, train_loss, val_loss))
        log.info(
            f"{fold.variant} epoch {epoch}: "
            f"train={train_loss:.4f} val={val_loss:.4f}"
        )
        score = train_loss if math.isnan(val_loss) else val_loss
        if score < best_score:
            best, best_epoch, best_score = params.copy(), epoch, score

    log.info(f"{fold.variant}: best epoch {best_epoch}")
    return TrainResult(fold.variant, best, params, best_epoch, trace)


def write_result(result: TrainResult, run_dir: Path) -> Path:
    """Write `V{k}_best`, `V{k}_last` and `V{k}_trace.csv` into `run_dir`."""
    run_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.best, run_dir / f"{result.variant}_best")
    save_checkpoint(result.last, run_dir / f"{result.variant}_last")
    path = run_dir / f"{result.variant}_trace.csv"
    result.trace_frame().to_csv(path, index=False)
    log.info(f"write: {path}")
    return path
