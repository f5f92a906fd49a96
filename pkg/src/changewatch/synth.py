"""Synthetic multi-modal scenes with injected change events and exact labels."""

# std
from __future__ import annotations
from datetime import datetime
from datetime import timedelta
from pathlib import Path
from typing import Any
from typing import Dict
from typing import List
from typing import Optional
from typing import Tuple
import dataclasses
import json
import logging
import math

# lib
import numpy as np
from numpy.typing import NDArray

# pkg
from .ingest import DATASETS
from .ingest import LabeledTile
from .ingest import MODES
from .ingest import Mode
from .ingest import Observation
from .ingest import ObservationSeries
from .ingest import Scene
from .ingest import datestr
from .ingest import parse_date

log = logging.getLogger(__name__)

OPT_BASE = np.array(
    [0.12, 0.10, 0.09, 0.08, 0.12, 0.20, 0.24, 0.26, 0.27, 0.08, 0.02, 0.18, 0.12],
    dtype=np.float64,
)
"""Mean reflectance per optical band."""

SEASON_WEIGHT = np.array([0.3] * 5 + [1.0] * 4 + [0.3] * 4, dtype=np.float64)
"""Seasonal response per optical band (red edge and NIR respond most)."""

CLOUD = 0.8
"""Reflectance of cloudy pixels."""

KINDS = ("construction", "destruction")

SIGNATURES: Dict[str, Tuple[Tuple[float, ...], float]] = {
    "construction": (
        (0.15, 0.15, 0.15, 0.15, 0.1, 0.0, -0.08, -0.1, -0.1, 0.0, 0.0, 0.12, 0.12),
        0.15,
    ),
    "destruction": (
        (0.08, 0.1, 0.12, 0.14, 0.12, 0.06, 0.0, -0.06, -0.06, 0.0, 0.0, 0.16, 0.14),
        -0.05,
    ),
}
"""Default (optical offsets, SAR offset) per event kind."""


@dataclasses.dataclass
class ChangeEvent:
    """A rectangle whose signature ramps in from `start` over `ramp` days."""

    row: int
    col: int
    height: int
    width: int

    start: float
    """Day (since the scenario start) the change begins."""

    ramp: float = 30.0
    """Days until the change is complete."""

    optical: Tuple[float, ...] = SIGNATURES["construction"][0]
    """Per-band reflectance offset once complete."""

    sar: float = SIGNATURES["construction"][1]
    """VV backscatter offset once complete (VH receives half)."""

    kind: str = "construction"
    """`construction` or `destruction`."""

    def progress(self, day: float) -> float:
        """Fraction of the change present at `day`."""
        return float(np.clip((day - self.start) / self.ramp, 0.0, 1.0))

    def active(self, start: float, end: float) -> bool:
        """Whether `[self.start, self.start + ramp]` intersects `[start, end]`."""
        return self.start <= end and self.start + self.ramp >= start

    def slices(self) -> Tuple[slice, slice]:
        """Covered rows and columns."""
        rows = slice(self.row, self.row + self.height)
        return rows, slice(self.col, self.col + self.width)

    def asdict(self) -> Dict[str, Any]:
        """Return `dict` representation."""
        data = dataclasses.asdict(self)
        data["optical"] = list(self.optical)
        return data

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> ChangeEvent:
        """Return event from a `dict`."""
        kind = str(data.get("kind", "construction"))
        optical, sar = SIGNATURES.get(kind, SIGNATURES["construction"])
        return ChangeEvent(
            row=int(data["row"]),
            col=int(data["col"]),
            height=int(data["height"]),
            width=int(data["width"]),
            start=float(data["start"]),
            ramp=float(data.get("ramp", 30.0)),
            optical=tuple(float(v) for v in data.get("optical", optical)),
            sar=float(data.get("sar", sar)),
            kind=kind,
        )


@dataclasses.dataclass
class ScenarioSpec:
    """Scene size, acquisition plan, sensor models and change events."""

    height: int = 128
    width: int = 128

    duration: float = 730
    """Days covered."""

    start: datetime = dataclasses.field(
        default_factory=lambda: parse_date("2020-01-01T00:00:00Z")
    )
    """UTC start of the scenario."""

    cadence: Dict[str, float] = dataclasses.field(
        default_factory=lambda: {"SAR_ASC": 6, "SAR_DSC": 6, "OPT": 4}
    )
    """Revisit in days per mode."""

    phase: Dict[str, float] = dataclasses.field(
        default_factory=lambda: {
            "SAR_ASC": 16 / 24,
            "SAR_DSC": 3 + 4 / 24,
            "OPT": 10 / 24,
        }
    )
    """Offset of the first acquisition in days per mode (day and time of day)."""

    cloud_probability: float = 0.3
    """Chance that a cloud block covers part of an optical frame."""

    cloud_block: int = 8
    """Side of cloud blocks in pixels."""

    texture_seed: int = 0
    """Seed of the static background."""

    texture_block: int = 4
    """Side of background texture blocks in pixels."""

    seasonal_amplitude: float = 0.05
    """Amplitude of the yearly optical sinusoid."""

    optical_noise: float = 0.01
    """Standard deviation of optical sensor noise."""

    looks: int = 4
    """Speckle looks of SAR frames (0 disables speckle)."""

    tile: int = 32
    """Label tile size."""

    test_fraction: float = 0.25
    """Share of label tiles tagged `testing`."""

    events: List[ChangeEvent] = dataclasses.field(default_factory=list)
    """Injected changes."""

    def days(self, mode: Mode) -> List[float]:
        """Acquisition days of `mode`."""
        cadence, phase = self.cadence[mode.value], self.phase.get(mode.value, 0.0)
        count = max(0, math.ceil((self.duration - phase) / cadence))
        return [phase + k * cadence for k in range(count)]

    def find_issues(self) -> List[str]:
        """Return a description of every violated invariant."""
        issues = []
        if self.height < 1 or self.width < 1 or self.duration <= 0:
            issues.append(
                f"empty scenario: {self.height}x{self.width}, {self.duration} days"
            )
        for mode in MODES:
            if self.cadence.get(mode.value, 0) < 1:
                issues.append(f"cadence of {mode.value} must be >= 1 day")
        if not 0 <= self.cloud_probability < 1:
            issues.append(
                f"cloud_probability must be in [0, 1): {self.cloud_probability}"
            )
        if self.looks < 0 or self.optical_noise < 0:
            issues.append("looks and optical_noise must be >= 0")
        if not 0 <= self.test_fraction <= 1:
            issues.append(f"test_fraction must be in [0, 1]: {self.test_fraction}")
        for k, e in enumerate(self.events):
            inside = (
                0 <= e.row and e.row + e.height <= self.height
                and 0 <= e.col and e.col + e.width <= self.width
                and e.height > 0 and e.width > 0
            )
            if not inside:
                issues.append(
                    f"event {k} outside scene: {e.row},{e.col} {e.height}x{e.width}"
                )
            if e.ramp < 1:
                issues.append(f"event {k}: ramp must be >= 1 day")
            if len(e.optical) != Mode.OPT.bands:
                issues.append(
                    f"event {k}: optical signature needs {Mode.OPT.bands} bands"
                )
        return issues

    def check(self) -> ScenarioSpec:
        """Raise `ValueError` if any invariant is violated."""
        issues = self.find_issues()
        if issues:
            raise ValueError("invalid scenario: " + "; ".join(issues))
        return self

    def asdict(self) -> Dict[str, Any]:
        """Return `dict` representation (`scenario.json`)."""
        data = dataclasses.asdict(self)
        data["start"] = datestr(self.start)
        data["events"] = [e.asdict() for e in self.events]
        return data

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> ScenarioSpec:
        """Return spec from a `dict`; missing keys take defaults."""
        data = dict(data)
        unknown = set(data) - {f.name for f in dataclasses.fields(ScenarioSpec)}
        if unknown:
            raise ValueError(f"unknown scenario keys: {', '.join(sorted(unknown))}")
        try:
            if "start" in data:
                data["start"] = parse_date(str(data["start"]))
            if "events" in data:
                data["events"] = [ChangeEvent.from_dict(e) for e in data["events"]]
        except (KeyError, TypeError) as e:
            raise ValueError(f"malformed scenario: missing {e}") from None
        return ScenarioSpec(**data)

    def save(self, path: Path) -> Path:
        """Write the scenario as JSON."""
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.asdict(), indent=2))
        log.info(f"write: {path}")
        return path

    @staticmethod
    def load(path: Path) -> ScenarioSpec:
        """Read a spec written by `save`."""
        try:
            return ScenarioSpec.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as e:
            raise ValueError(f"corrupt scenario {path}: {e}") from None


def default_scenario(seed: int = 0, events: int = 12) -> ScenarioSpec:
    """128x128 pixels, 730 days, `events` changes starting between days 150 and 600."""
    spec = ScenarioSpec(texture_seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1000]))
    for k in range(events):
        kind = KINDS[k % len(KINDS)]
        height, width = (int(v) for v in rng.integers(6, 15, size=2))
        optical, sar = SIGNATURES[kind]
        spec.events.append(
            ChangeEvent(
                row=int(rng.integers(0, spec.height - height + 1)),
                col=int(rng.integers(0, spec.width - width + 1)),
                height=height,
                width=width,
                start=float(rng.integers(150, 601)),
                ramp=float(rng.integers(20, 61)),
                optical=optical,
                sar=sar,
                kind=kind,
            )
        )
    return spec


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def _blocks(
    rng: np.random.Generator, shape: Tuple[int, int], block: int
) -> NDArray[np.float64]:
    """Uniform values constant over `block`x`block` squares."""
    h, w = shape
    low = rng.random((-(-h // block), -(-w // block)))
    return np.repeat(np.repeat(low, block, axis=0), block, axis=1)[:h, :w]


def _changes(
    spec: ScenarioSpec, day: float
) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Optical `[13][H][W]` and SAR `[H][W]` offsets present at `day`."""
    optical = np.zeros((Mode.OPT.bands, spec.height, spec.width))
    sar = np.zeros((spec.height, spec.width))
    for event in spec.events:
        r = event.progress(day)
        if r > 0:
            rows, cols = event.slices()
            optical[:, rows, cols] += r * np.asarray(event.optical)[:, None, None]
            sar[rows, cols] += r * event.sar
    return optical, sar


def generate_scene(
    spec: ScenarioSpec, seed: int = 0, sar_seed: Optional[int] = None
) -> ObservationSeries:
    """Render every acquisition of `spec`.

    Optical: background + seasonal sinusoid + changes + Gaussian noise, with
    blocky clouds. SAR: (background + changes) times mean-1 gamma speckle; the
    two passes differ by an independent texture. Each frame draws from its own
    stream `(seed, mode, index)`; `sar_seed` replaces `seed` for SAR frames.
    """
    spec.check()
    shape = (spec.height, spec.width)
    texture = _blocks(_rng(spec.texture_seed), shape, spec.texture_block)
    optical_base = OPT_BASE[:, None, None] * (0.6 + 0.8 * texture)
    sar_base = 0.05 + 0.25 * texture

    series = ObservationSeries(Scene(spec.height, spec.width, crs="synthetic"))
    for m, mode in enumerate(MODES):
        stream = seed if (sar_seed is None or not mode.is_sar) else sar_seed
        phase = _blocks(_rng(spec.texture_seed, m + 1), shape, spec.texture_block)
        base = sar_base * (0.8 + 0.4 * phase)
        for k, day in enumerate(spec.days(mode)):
            rng = _rng(stream, m, k)
            optical, sar = _changes(spec, day)
            timestamp = spec.start + timedelta(days=day)
            if mode.is_sar:
                vv = np.maximum(base + sar, 1e-4)
                data = np.stack([vv, np.maximum(0.3 * base + 0.5 * sar, 1e-4)])
                if spec.looks > 0:
                    speckle = rng.gamma(spec.looks, 1.0 / spec.looks, size=data.shape)
                    data = data * speckle
                obs = Observation(mode, timestamp, data.astype(np.float32))
            else:
                season = spec.seasonal_amplitude * math.sin(2 * math.pi * day / 365.25)
                data = optical_base + season * SEASON_WEIGHT[:, None, None] + optical
                if spec.optical_noise > 0:
                    data = data + rng.normal(0.0, spec.optical_noise, size=data.shape)
                cloudy = np.zeros(shape, dtype=bool)
                if spec.cloud_probability > 0:
                    cover = _blocks(rng, shape, spec.cloud_block)
                    cloudy = cover < spec.cloud_probability
                    data[:, cloudy] = CLOUD
                mask = (~cloudy).astype(np.uint8)
                obs = Observation(mode, timestamp, data.astype(np.float32), mask)
            series[mode].append(obs)
        log.debug(f"generated {len(series[mode])} {mode.value} frames")
    log.info(f"generated {len(series)} observations ({spec.height}x{spec.width})")
    return series


def change_raster(spec: ScenarioSpec, start: float, end: float) -> NDArray[np.float32]:
    """1.0 where an event active during `[start, end]` (days) covers the pixel."""
    if end <= start:
        raise ValueError(f"empty period: [{start}, {end}]")
    out = np.zeros((spec.height, spec.width), dtype=np.float32)
    for event in spec.events:
        if event.active(start, end):
            out[event.slices()] = 1.0
    return out


def generate_labels(
    spec: ScenarioSpec, start: float = 0.0, end: Optional[float] = None
) -> List[LabeledTile]:
    """Per-tile labels of the changes active in `[start, end]` (default: all days).

    Tiles follow the training grid; a seeded share `test_fraction` of them is
    tagged `testing`, the rest `trainval`.
    """
    end = spec.duration if end is None else end
    full = change_raster(spec, start, end)
    size = spec.tile
    rows, cols = spec.height // size, spec.width // size
    tiles = [(i, j) for i in range(rows) for j in range(cols)]
    order = _rng(spec.texture_seed, 2000).permutation(len(tiles))
    testing = {tiles[int(k)] for k in order[: round(spec.test_fraction * len(tiles))]}
    labels = []
    for i, j in tiles:
        label = full[i * size : (i + 1) * size, j * size : (j + 1) * size].copy()
        dataset = DATASETS[1] if (i, j) in testing else DATASETS[0]
        labels.append(LabeledTile((i, j), label, dataset))
    positives = int(sum(t.label.sum() for t in labels))
    log.info(
        f"labeled {len(labels)} tiles ({len(testing)} testing), "
        f"{positives} changed pixels"
    )
    return labels
