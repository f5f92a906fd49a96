"""Observation bundles: the on-disk format for multi-modal raster series.

A bundle is a directory:

    <root>/scene.json       {height, width, crs, bounds, version}
    <root>/manifest.json    [{mode, timestamp, data_path, mask_path?}, ...]
    <root>/data/*.f32       little-endian float32, [band][row][col]
    <root>/data/*.u8        uint8 validity masks, [row][col] (optical only)

Label tiles use the same raster encoding with a `labels.json` manifest.
"""

# std
from __future__ import annotations
from datetime import datetime
from datetime import timezone
from enum import Enum
from pathlib import Path
from typing import Any
from typing import Dict
from typing import List
from typing import Optional
from typing import Tuple
import dataclasses
import json
import logging

# lib
import numpy as np
from numpy.typing import NDArray

# pkg
from . import BUNDLE_VERSION

log = logging.getLogger(__name__)

TileId = Tuple[int, int]
"""Tile coordinates `(tile_y, tile_x)`."""

FLOAT = np.dtype("<f4")
"""On-disk raster encoding."""

MASK = np.dtype("u1")
"""On-disk mask encoding."""

DATASETS = ("trainval", "testing")
"""Valid dataset tags for labeled tiles."""


class Mode(str, Enum):
    """Observation mode."""

    SAR_ASC = "SAR_ASC"
    SAR_DSC = "SAR_DSC"
    OPT = "OPT"

    @property
    def bands(self) -> int:
        """Number of bands delivered by this mode."""
        return 13 if self is Mode.OPT else 2

    @property
    def is_sar(self) -> bool:
        """`True` for both SAR orbit directions."""
        return self is not Mode.OPT


MODES = (Mode.SAR_ASC, Mode.SAR_DSC, Mode.OPT)
"""Modes in assembled band order."""


def datestr(date: datetime) -> str:
    """Return an ISO-8601 formatted UTC date string.

    >>> datestr(datetime(2000, 1, 1, tzinfo=timezone.utc))
    '2000-01-01T00:00:00Z'
    """
    return date.astimezone(timezone.utc).isoformat()[:19] + "Z"


def parse_date(value: str) -> datetime:
    """Parse an ISO-8601 UTC date string (seconds precision).

    >>> parse_date("2000-01-01T00:00:00Z").year
    2000
    """
    date = datetime.fromisoformat(value.replace("Z", "+00:00"))
    if date.tzinfo is None:
        date = date.replace(tzinfo=timezone.utc)
    return date.astimezone(timezone.utc).replace(microsecond=0)


@dataclasses.dataclass(eq=False)
class Observation:
    """A single timestamped raster of one mode."""

    mode: Mode
    """Observation mode."""

    timestamp: datetime
    """UTC acquisition time."""

    data: NDArray[np.float32]
    """Raster `[bands][H][W]`."""

    mask: Optional[NDArray[np.uint8]] = None
    """Validity raster `[H][W]` (1 = valid); optical only."""

    @property
    def shape(self) -> Tuple[int, int]:
        """Spatial shape `(H, W)`."""
        return (int(self.data.shape[-2]), int(self.data.shape[-1]))

    def valid(self) -> NDArray[np.bool_]:
        """Per-pixel validity (SAR is always fully valid)."""
        if self.mask is None:
            return np.ones(self.shape, dtype=bool)
        return self.mask.astype(bool)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Observation):
            return NotImplemented
        if (self.mask is None) != (other.mask is None):
            return False
        return (
            self.mode == other.mode
            and self.timestamp == other.timestamp
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
            and (self.mask is None or np.array_equal(self.mask, other.mask))
        )


@dataclasses.dataclass
class Scene:
    """Scene metadata."""

    height: int
    """Rows."""

    width: int
    """Columns."""

    crs: str = ""
    """Coordinate reference system (opaque)."""

    bounds: str = ""
    """Geographic bounds (opaque)."""

    def asdict(self) -> Dict[str, Any]:
        """Return `dict` representation (as written to `scene.json`)."""
        return {
            "version": BUNDLE_VERSION,
            "height": self.height,
            "width": self.width,
            "crs": self.crs,
            "bounds": self.bounds,
        }


@dataclasses.dataclass
class ObservationSeries:
    """Per-mode chronologically sorted observations of one scene."""

    scene: Scene
    """Scene metadata."""

    observations: Dict[Mode, List[Observation]] = dataclasses.field(
        default_factory=lambda: {m: [] for m in MODES}
    )
    """Observations by mode."""

    def __getitem__(self, mode: Mode) -> List[Observation]:
        return self.observations.setdefault(mode, [])

    def __len__(self) -> int:
        return sum(len(v) for v in self.observations.values())

    def counts(self) -> Dict[Mode, int]:
        """Number of observations per mode."""
        return {m: len(self[m]) for m in MODES}

    def replace(self, observations: Dict[Mode, List[Observation]]) -> ObservationSeries:
        """Return a series of the same scene with other observations."""
        return ObservationSeries(
            self.scene, {m: observations.get(m, []) for m in MODES}
        )


@dataclasses.dataclass(frozen=True)
class Finding:
    """A violated series invariant."""

    mode: Mode
    """Mode of the offending observation."""

    index: int
    """Index within the mode."""

    rule: str
    """Violated rule."""

    def __str__(self) -> str:
        return f"{self.mode.value}[{self.index}]: {self.rule}"


def validate_series(series: ObservationSeries) -> List[Finding]:
    """Return every violated invariant; empty iff the series is valid."""
    findings: List[Finding] = []
    h, w = series.scene.height, series.scene.width
    for mode in MODES:
        previous: Optional[datetime] = None
        for index, obs in enumerate(series[mode]):
            mask = obs.mask
            rules = {
                "mode mismatch": obs.mode != mode,
                "band-count violation": obs.data.ndim != 3
                or obs.data.shape[0] != mode.bands,
                "shape mismatch": obs.data.shape[-2:] != (h, w),
                "non-finite values": not np.all(np.isfinite(obs.data)),
                "missing mask": mode is Mode.OPT and mask is None,
                "unexpected mask": mode.is_sar and mask is not None,
                "mask shape mismatch": mask is not None and mask.shape != (h, w),
                "non-monotonic timestamp": previous is not None
                and obs.timestamp <= previous,
            }
            findings.extend(Finding(mode, index, r) for r, bad in rules.items() if bad)
            previous = obs.timestamp
    return findings


def write_raster(path: Path, data: NDArray[Any], dtype: np.dtype[Any] = FLOAT) -> Path:
    """Write a raster in the bundle encoding."""
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(data, dtype=dtype).tofile(path)
    return path


def read_raster(
    path: Path, shape: Tuple[int, ...], dtype: np.dtype[Any] = FLOAT
) -> NDArray[Any]:
    """Read a raster in the bundle encoding and check its size."""
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise ValueError(
            f"shape mismatch: {path} has {len(raw)} bytes, expected {expected} "
            f"for shape {shape}"
        )
    native = np.dtype(dtype.kind + str(dtype.itemsize))
    return np.frombuffer(raw, dtype=dtype).astype(native).reshape(shape)


def _load_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ValueError(f"missing file: {path}") from None
    except json.JSONDecodeError as e:
        raise ValueError(f"corrupt file: {path}: {e}") from None


def read_bundle(path: Path) -> ObservationSeries:
    """Read and validate an observation bundle."""
    info = _load_json(path / "scene.json")
    records = _load_json(path / "manifest.json")
    if not isinstance(info, dict) or not isinstance(records, list):
        raise ValueError(f"corrupt manifest: {path}")
    if info.get("version", BUNDLE_VERSION) != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version: {info.get('version')}")

    try:
        scene = Scene(
            int(info["height"]),
            int(info["width"]),
            str(info.get("crs", "")),
            str(info.get("bounds", "")),
        )
        series = ObservationSeries(scene)
        for record in records:
            mode = Mode(record["mode"])
            shape = (mode.bands, scene.height, scene.width)
            data = read_raster(path / record["data_path"], shape)
            mask = None
            if record.get("mask_path"):
                mask_shape = (scene.height, scene.width)
                mask = read_raster(path / record["mask_path"], mask_shape, MASK)
            timestamp = parse_date(record["timestamp"])
            series[mode].append(Observation(mode, timestamp, data, mask))
    except (KeyError, TypeError) as e:
        raise ValueError(f"corrupt manifest: {path}: missing {e}") from None

    for mode in MODES:
        series[mode].sort(key=lambda o: o.timestamp)

    findings = validate_series(series)
    if findings:
        raise ValueError(f"invalid bundle {path}: " + "; ".join(map(str, findings)))
    log.debug(f"read {len(series)} observations from {path}")
    return series


def write_bundle(series: ObservationSeries, path: Path) -> Path:
    """Write `series` as a bundle at `path`."""
    path.mkdir(parents=True, exist_ok=True)
    records: List[Dict[str, str]] = []
    for mode in MODES:
        for index, obs in enumerate(series[mode]):
            name = f"data/{mode.value.lower()}_{index:05d}"
            record = {
                "mode": mode.value,
                "timestamp": datestr(obs.timestamp),
                "data_path": f"{name}.f32",
            }
            write_raster(path / record["data_path"], obs.data)
            if obs.mask is not None:
                record["mask_path"] = f"{name}.u8"
                write_raster(path / record["mask_path"], obs.mask, MASK)
            records.append(record)

    (path / "scene.json").write_text(json.dumps(series.scene.asdict(), indent=2))
    (path / "manifest.json").write_text(json.dumps(records, indent=2))
    log.info(f"write: {path} ({len(records)} observations)")
    return path


@dataclasses.dataclass(eq=False)
class LabeledTile:
    """Binary ground truth for one tile."""

    tile: TileId
    """Tile coordinates."""

    label: NDArray[np.float32]
    """Binary raster (1.0 = change)."""

    dataset: str = DATASETS[0]
    """Dataset tag (`trainval` or `testing`)."""

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabeledTile):
            return NotImplemented
        return (
            self.tile == other.tile
            and self.dataset == other.dataset
            and np.array_equal(self.label, other.label)
        )


def tile_name(tile: TileId) -> str:
    """Return the `y:x` name of a tile.

    >>> tile_name((43, 18))
    '43:18'
    """
    return f"{tile[0]}:{tile[1]}"


def parse_tile(value: str) -> TileId:
    """Parse a `y:x` tile name.

    >>> parse_tile("43:18")
    (43, 18)
    """
    try:
        y, x = value.split(":")
        return (int(y), int(x))
    except ValueError:
        raise ValueError(f"malformed tile (expected Y:X): {value}") from None


def write_labels(labels: List[LabeledTile], path: Path) -> Path:
    """Write label tiles and their `labels.json` manifest into `path`."""
    records = []
    for item in sorted(labels, key=lambda t: t.tile):
        y, x = item.tile
        name = f"labels/label_{y:03d}_{x:03d}.f32"
        write_raster(path / name, item.label)
        height, width = item.label.shape
        records.append(
            {
                "tile_y": y,
                "tile_x": x,
                "path": name,
                "dataset": item.dataset,
                "height": height,
                "width": width,
            }
        )
    out = path / "labels.json"
    out.write_text(json.dumps(records, indent=2))
    log.info(f"write: {out} ({len(records)} tiles)")
    return out


def read_labels(path: Path) -> List[LabeledTile]:
    """Read a `labels.json` manifest (or the directory containing it)."""
    if path.is_dir():
        path = path / "labels.json"
    records = _load_json(path)
    labels = []
    try:
        for record in records:
            shape = (int(record["height"]), int(record["width"]))
            label = read_raster(path.parent / record["path"], shape)
            if not np.all((label == 0.0) | (label == 1.0)):
                raise ValueError(f"non-binary label: {record['path']}")
            dataset = record.get("dataset", DATASETS[0])
            if dataset not in DATASETS:
                raise ValueError(f"unknown dataset tag: {dataset}")
            tile = (int(record["tile_y"]), int(record["tile_x"]))
            labels.append(LabeledTile(tile, label, dataset))
    except (KeyError, TypeError) as e:
        raise ValueError(f"corrupt label manifest: {path}: missing {e}") from None
    return labels
