"""Temporal stacking, assembling, tiling and windowing of observation series."""

# std
from __future__ import annotations
from datetime import datetime
from datetime import timedelta
from pathlib import Path
from typing import Any
from typing import Dict
from typing import Iterable
from typing import Iterator
from typing import List
from typing import Optional
from typing import Tuple
from typing import Union
import dataclasses
import json
import logging
import math

# lib
import numpy as np
from numpy.typing import NDArray

# pkg
from .ingest import Mode
from .ingest import MODES
from .ingest import Observation
from .ingest import ObservationSeries
from .ingest import TileId
from .ingest import tile_name
from .model import WindowTensor

log = logging.getLogger(__name__)

DAY = 86400
"""Seconds per day."""

INF = math.inf
"""Sampling step meaning "never update" (freeze at the first observation)."""

N_BANDS = 17
"""Bands of an assembled frame."""

BAND_SLICES = {
    Mode.SAR_ASC: slice(0, 2),
    Mode.SAR_DSC: slice(2, 4),
    Mode.OPT: slice(4, 17),
}
"""Assembled band ranges per mode: asc VV, VH; dsc VV, VH; optical b1..b13."""

Days = float
"""A number of days; `INF` allowed where documented."""


def parse_days(value: Union[str, int, float, None]) -> Days:
    """Parse a day count; `inf`, `∞` and `null` mean `INF`.

    >>> parse_days("120"), parse_days("inf"), parse_days(None)
    (120.0, inf, inf)
    """
    if value is None or (isinstance(value, str) and value.strip() in ("inf", "∞")):
        return INF
    days = float(value)
    if not days > 0:
        raise ValueError(f"day count must be positive: {value}")
    return days


def days_str(days: Days) -> str:
    """Format a day count for files and logs.

    >>> days_str(2.0), days_str(INF), days_str(2.5)
    ('2', 'inf', '2.5')
    """
    if math.isinf(days):
        return "inf"
    return str(int(days)) if float(days).is_integer() else str(days)


@dataclasses.dataclass
class PipelineParams:
    """Data, tile and window parameters."""

    delta: Days = 2
    """Sampling step in days (`INF` allowed)."""

    period: Days = 183
    """Window period in days."""

    min_window: int = 35
    """Minimum observations per window; shorter windows are discarded."""

    max_window: int = 92
    """Maximum observations per window."""

    stride: int = 1
    """Window stride in assembled observations."""

    tile_x: int = 32
    """Tile width in pixels."""

    tile_y: int = 32
    """Tile height in pixels."""

    overlap: int = 0
    """Inference tile overlap in pixels."""

    def find_issues(self) -> List[str]:
        """Return a description of every violated invariant."""
        issues = []
        if not (self.delta >= 1):
            issues.append(f"delta must be >= 1 day or inf: {self.delta}")
        if math.isinf(self.period) or self.period <= 0:
            issues.append(f"period must be positive and finite: {self.period}")
        if self.min_window > self.max_window:
            issues.append(f"min_window > max_window: {self.min_window}")
        if self.stride < 1:
            issues.append(f"stride must be >= 1: {self.stride}")
        if self.tile_x < 3 or self.tile_y < 3:
            issues.append(f"tiles must be >= 3 pixels: {self.tile_y}x{self.tile_x}")
        if self.overlap < 0 or self.overlap >= min(self.tile_x, self.tile_y):
            issues.append(f"overlap must be in [0, tile): {self.overlap}")
        return issues

    def check(self) -> PipelineParams:
        """Raise `ValueError` if any invariant is violated."""
        issues = self.find_issues()
        if issues:
            raise ValueError("invalid pipeline parameters: " + "; ".join(issues))
        return self


@dataclasses.dataclass(eq=False)
class AssembledSequence:
    """Joint 17-band frames sampled every `delta` days."""

    timestamps: List[datetime]
    """Sampled UTC instants (step starts), sorted."""

    frames: NDArray[np.float32]
    """Frames `[T][17][H][W]`."""

    novelty: NDArray[np.bool_]
    """Whether a new observation of each mode (`MODES` order) arrived `[T][3]`."""

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def shape(self) -> Tuple[int, int]:
        """Spatial shape `(H, W)`."""
        return (int(self.frames.shape[-2]), int(self.frames.shape[-1]))

    def seconds(self) -> NDArray[np.int64]:
        """Timestamps as POSIX seconds."""
        return np.array([int(t.timestamp()) for t in self.timestamps], dtype=np.int64)

    def crop(self, y: int, x: int, h: int, w: int) -> AssembledSequence:
        """Return the `h`x`w` region at `(y, x)`; zero-padded beyond the scene."""
        height, width = self.shape
        if y + h <= height and x + w <= width:
            frames = self.frames[:, :, y : y + h, x : x + w]
        else:
            frames = np.zeros((len(self), N_BANDS, h, w), dtype=self.frames.dtype)
            hh, ww = min(h, height - y), min(w, width - x)
            frames[:, :, :hh, :ww] = self.frames[:, :, y : y + hh, x : x + ww]
        return AssembledSequence(list(self.timestamps), frames, self.novelty.copy())


def temporal_stack(series: ObservationSeries) -> ObservationSeries:
    """Carry the last valid value of each pixel forward through masked pixels.

    Pixels without any prior valid value are zero. The result is fully valid.
    """
    h, w = series.scene.height, series.scene.width
    stacked: Dict[Mode, List[Observation]] = {}
    for mode in MODES:
        carry = np.zeros((mode.bands, h, w), dtype=np.float32)
        out = []
        for obs in series[mode]:
            carry = np.where(obs.valid()[None], obs.data, carry).astype(np.float32)
            mask = None if obs.mask is None else np.ones((h, w), dtype=np.uint8)
            out.append(Observation(mode, obs.timestamp, carry, mask))
        stacked[mode] = out
    return series.replace(stacked)


def stale_resample(
    series: ObservationSeries, delta_sar: Days = 2, delta_opt: Days = 2
) -> ObservationSeries:
    """Keep every observation but only update its values every `delta` days.

    Each observation takes the values of the most recent held observation;
    a new one is held once `delta` days have passed since the last one.
    SAR ascending and descending share `delta_sar`. `INF` freezes a mode at its
    first observation; 0 leaves a mode unchanged.
    """
    out: Dict[Mode, List[Observation]] = {}
    for mode in MODES:
        delta = delta_sar if mode.is_sar else delta_opt
        held: Optional[Observation] = None
        resampled = []
        for obs in series[mode]:
            if held is None:
                held = obs
            elif not math.isinf(delta):
                age = (obs.timestamp - held.timestamp).total_seconds()
                if age >= delta * DAY:
                    held = obs
            resampled.append(Observation(mode, obs.timestamp, held.data, held.mask))
        out[mode] = resampled
    return series.replace(out)


def assemble(series: ObservationSeries, params: PipelineParams) -> AssembledSequence:
    """Merge stacked per-mode observations into 17-band frames every `delta` days.

    A frame is emitted only for steps in which at least one mode received a new
    observation; it holds each mode's latest values (zeros before the first).
    """
    h, w = series.scene.height, series.scene.width
    items = sorted(
        (
            (obs.timestamp, MODES.index(obs.mode), obs)
            for m in MODES
            for obs in series[m]
        ),
        key=lambda item: (item[0], item[1]),
    )
    if not items:
        return AssembledSequence(
            [], np.zeros((0, N_BANDS, h, w), np.float32), np.zeros((0, 3), bool)
        )

    origin = items[0][0]
    step_seconds = params.delta * DAY

    def step(timestamp: datetime) -> int:
        if math.isinf(step_seconds):
            return 0
        return int((timestamp - origin).total_seconds() // step_seconds)

    steps = sorted({step(t) for t, _, _ in items})
    frames = np.empty((len(steps), N_BANDS, h, w), dtype=np.float32)
    novelty = np.zeros((len(steps), len(MODES)), dtype=bool)
    timestamps = []
    current = np.zeros((N_BANDS, h, w), dtype=np.float32)

    k = 0
    for index, number in enumerate(steps):
        while k < len(items) and step(items[k][0]) == number:
            _, m, obs = items[k]
            current[BAND_SLICES[obs.mode]] = obs.data
            novelty[index, m] = True
            k += 1
        frames[index] = current
        offset = 0 if math.isinf(step_seconds) else number * step_seconds
        timestamps.append(origin + timedelta(seconds=offset))

    log.debug(f"assembled {len(items)} observations into {len(steps)} frames")
    return AssembledSequence(timestamps, frames, novelty)


def tile_origins(
    size: int, tile: int, overlap: int = 0, inference: bool = False
) -> List[int]:
    """Return tile origins along one axis.

    Training tiles do not overlap and trailing partial tiles are dropped.
    Inference tiles share `overlap` pixels and cover the whole axis (the last
    tile may extend beyond it and is zero-padded).

    >>> tile_origins(64, 32)
    [0, 32]
    >>> tile_origins(100, 93, 8, inference=True)
    [0, 85]
    """
    if tile > size:
        raise ValueError(f"tile size {tile} larger than scene ({size})")
    if not inference:
        return [k * tile for k in range(size // tile)]
    step = tile - overlap
    if step <= 0:
        raise ValueError(f"overlap {overlap} must be smaller than tile {tile}")
    count = max(1, math.ceil((size - overlap) / step))
    return [k * step for k in range(count)]


@dataclasses.dataclass(eq=False)
class TileGrid:
    """Tiles of a scene."""

    height: int
    """Scene rows."""

    width: int
    """Scene columns."""

    tile_y: int
    """Tile rows."""

    tile_x: int
    """Tile columns."""

    overlap: int
    """Shared pixels between neighboring inference tiles."""

    origins_y: List[int]
    """Row origins."""

    origins_x: List[int]
    """Column origins."""

    tiles: Dict[TileId, AssembledSequence] = dataclasses.field(default_factory=dict)
    """Tile sequences keyed by `(i, j)`."""

    def ids(self) -> List[TileId]:
        """Tile ids in row-major order."""
        rows, cols = len(self.origins_y), len(self.origins_x)
        return [(i, j) for i in range(rows) for j in range(cols)]


def tile_scene(
    frames: AssembledSequence, params: PipelineParams, inference: bool = False
) -> TileGrid:
    """Split a scene into tiles (see `tile_origins`)."""
    height, width = frames.shape
    overlap = params.overlap if inference else 0
    ys = tile_origins(height, params.tile_y, overlap, inference)
    xs = tile_origins(width, params.tile_x, overlap, inference)
    grid = TileGrid(height, width, params.tile_y, params.tile_x, overlap, ys, xs)
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            grid.tiles[(i, j)] = frames.crop(y, x, params.tile_y, params.tile_x)
    log.debug(f"tiled {height}x{width} into {len(ys)}x{len(xs)} tiles")
    return grid


def _axis_boxes(
    origins: List[int], tile: int, overlap: int, size: int
) -> List[Tuple[int, int]]:
    """Tile-local `[lo, hi)` ranges that cover each scene pixel exactly once."""
    boxes = []
    for k, origin in enumerate(origins):
        lo = 0 if k == 0 else overlap // 2
        hi = tile if k == len(origins) - 1 else tile - (overlap - overlap // 2)
        boxes.append((lo, min(hi, size - origin)))
    return boxes


Box = Tuple[slice, slice]


def mosaic_boxes(grid: TileGrid) -> Iterator[Tuple[TileId, Box, Box]]:
    """Yield `(tile, tile-local slices, scene slices)` for reassembly."""
    rows = _axis_boxes(grid.origins_y, grid.tile_y, grid.overlap, grid.height)
    cols = _axis_boxes(grid.origins_x, grid.tile_x, grid.overlap, grid.width)
    for i, (y, (y0, y1)) in enumerate(zip(grid.origins_y, rows)):
        for j, (x, (x0, x1)) in enumerate(zip(grid.origins_x, cols)):
            local = (slice(y0, y1), slice(x0, x1))
            scene = (slice(y + y0, y + y1), slice(x + x0, x + x1))
            yield (i, j), local, scene


def mosaic(grid: TileGrid, rasters: Dict[TileId, NDArray[Any]]) -> NDArray[np.float32]:
    """Reassemble per-tile rasters into one scene raster, cropping overlaps.

    Pixels not covered by any tile (training grids drop partial tiles) are 0.
    """
    out = np.zeros((grid.height, grid.width), dtype=np.float32)
    for tile, local, scene in mosaic_boxes(grid):
        if tile in rasters:
            out[scene] = rasters[tile][local]
    return out


@dataclasses.dataclass(frozen=True)
class Window:
    """A run of consecutive frames spanning less than one window period."""

    start: datetime
    """Timestamp of the first frame."""

    first: int
    """Index of the first frame."""

    stop: int
    """Index one past the last frame."""

    def __len__(self) -> int:
        return self.stop - self.first


@dataclasses.dataclass(eq=False)
class WindowSet:
    """Sliding windows over one tile's assembled sequence."""

    tile: TileId
    """Tile coordinates."""

    sequence: AssembledSequence
    """Frames the windows refer to."""

    windows: List[Window] = dataclasses.field(default_factory=list)
    """Windows in chronological order of their start."""

    def __len__(self) -> int:
        return len(self.windows)

    def tensor(self, index: int) -> WindowTensor:
        """Return the network input for window `index`."""
        window = self.windows[index]
        frames = self.sequence.frames[window.first : window.stop]
        return WindowTensor(frames, np.ones(len(window), dtype=bool))

    def starts(self) -> List[datetime]:
        """Start timestamps of all windows."""
        return [w.start for w in self.windows]

    def between(self, start: Optional[datetime], end: Optional[datetime]) -> WindowSet:
        """Return the windows starting in `[start, end)`."""
        kept = [
            w
            for w in self.windows
            if (start is None or w.start >= start) and (end is None or w.start < end)
        ]
        return WindowSet(self.tile, self.sequence, kept)


def build_windows(
    tile_seq: AssembledSequence, params: PipelineParams, tile: TileId = (0, 0)
) -> WindowSet:
    """Slide a `period`-day window over the frames every `stride` frames.

    Each window holds all frames in `[t, t + period)`. Windows with fewer than
    `min_window` (or more than `max_window`) frames are discarded; windows are
    never padded here.
    """
    seconds = tile_seq.seconds()
    windows = []
    for first in range(0, len(seconds), params.stride):
        limit = seconds[first] + params.period * DAY
        stop = int(np.searchsorted(seconds, limit, side="left"))
        count = stop - first
        if params.min_window <= count <= params.max_window:
            windows.append(Window(tile_seq.timestamps[first], first, stop))
        elif count > params.max_window:
            log.debug(
                f"window at frame {first} has {count} > {params.max_window} frames"
            )
    return WindowSet(tile, tile_seq, windows)


@dataclasses.dataclass(eq=False)
class Normalizer:
    """Per-band affine mapping of training min/max onto [0, 1]."""

    minimum: NDArray[np.float32]
    """Per-band minimum."""

    maximum: NDArray[np.float32]
    """Per-band maximum."""

    @staticmethod
    def fit(frames: AssembledSequence) -> Normalizer:
        """Compute per-band min/max over all frames and pixels."""
        if len(frames) == 0:
            zeros = np.zeros(N_BANDS, dtype=np.float32)
            return Normalizer(zeros, zeros.copy())
        return Normalizer(
            frames.frames.min(axis=(0, 2, 3)).astype(np.float32),
            frames.frames.max(axis=(0, 2, 3)).astype(np.float32),
        )

    @staticmethod
    def fit_all(sequences: Iterable[AssembledSequence]) -> Normalizer:
        """Compute per-band min/max pooled over several sequences."""
        fitted = [Normalizer.fit(seq) for seq in sequences if len(seq) > 0]
        if not fitted:
            raise ValueError("nothing to fit normalization on")
        return Normalizer(
            np.min([n.minimum for n in fitted], axis=0),
            np.max([n.maximum for n in fitted], axis=0),
        )

    def apply(self, frames: AssembledSequence) -> AssembledSequence:
        """Map each band to [0, 1] (clamped); degenerate bands map to 0."""
        lo = self.minimum[None, :, None, None]
        span = (self.maximum - self.minimum)[None, :, None, None]
        out = frames.frames - lo
        np.divide(out, span, out=out, where=span > 0)
        out[:, (self.maximum - self.minimum) <= 0] = 0.0
        np.clip(out, 0.0, 1.0, out=out)
        return AssembledSequence(list(frames.timestamps), out, frames.novelty.copy())

    def asdict(self) -> Dict[str, Dict[str, float]]:
        """Return `dict` representation (`band_index -> {min, max}`)."""
        return {
            str(b): {"min": float(lo), "max": float(hi)}
            for b, (lo, hi) in enumerate(zip(self.minimum, self.maximum))
        }

    @staticmethod
    def from_dict(data: Dict[str, Dict[str, float]]) -> Normalizer:
        """Return normalizer from a `dict`."""
        try:
            bands = [data[str(b)] for b in range(len(data))]
            lo = np.array([b["min"] for b in bands], dtype=np.float32)
            hi = np.array([b["max"] for b in bands], dtype=np.float32)
        except (KeyError, TypeError) as e:
            raise ValueError(f"corrupt normalization manifest: missing {e}") from None
        return Normalizer(lo, hi)

    def save(self, path: Path) -> Path:
        """Write the manifest as JSON."""
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.asdict(), indent=2))
        log.info(f"write: {path}")
        return path

    @staticmethod
    def load(path: Path) -> Normalizer:
        """Read a manifest written by `save`."""
        try:
            return Normalizer.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as e:
            raise ValueError(f"corrupt normalization manifest {path}: {e}") from None


def normalize(frames: AssembledSequence, manifest: Normalizer) -> AssembledSequence:
    """Normalize `frames` with a manifest computed from training data."""
    return manifest.apply(frames)


@dataclasses.dataclass(eq=False)
class PreparedScene:
    """A normalized, tiled and windowed scene."""

    normalizer: Normalizer
    """Normalization used (fitted on this scene unless given)."""

    grid: TileGrid
    """Tiles of the normalized sequence."""

    windows: Dict[TileId, WindowSet]
    """Windows per tile."""


def prepare_scene(
    stacked: ObservationSeries,
    params: PipelineParams,
    normalizer: Optional[Normalizer] = None,
    inference: bool = False,
    fit_tiles: Optional[Iterable[TileId]] = None,
) -> PreparedScene:
    """Assemble, normalize, tile and window an already stacked series.

    Without a `normalizer`, one is fit on `fit_tiles` (default: the whole scene).
    """
    params.check()
    frames = assemble(stacked, params)
    if normalizer is None and fit_tiles is not None:
        raw, tiles = tile_scene(frames, params, inference).tiles, list(fit_tiles)
        outside = [tile_name(t) for t in tiles if t not in raw]
        if outside:
            raise ValueError(f"tiles outside the tiled scene: {', '.join(outside)}")
        normalizer = Normalizer.fit_all(raw[t] for t in tiles)
    normalizer = normalizer or Normalizer.fit(frames)
    grid = tile_scene(normalize(frames, normalizer), params, inference)
    windows = {
        tile: build_windows(seq, params, tile) for tile, seq in grid.tiles.items()
    }
    total = sum(len(w) for w in windows.values())
    log.info(f"prepared {len(frames)} frames, {len(windows)} tiles, {total} windows")
    return PreparedScene(normalizer, grid, windows)
