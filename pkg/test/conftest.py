"""Shared test fixtures."""

# std
from datetime import timedelta
from typing import Callable

# lib
import numpy as np
import pytest

# pkg
from changewatch.ingest import MODES
from changewatch.ingest import Mode
from changewatch.ingest import Observation
from changewatch.ingest import ObservationSeries
from changewatch.ingest import Scene
from changewatch.ingest import TileId
from changewatch.ingest import parse_date
from changewatch.model import Topology
from changewatch.pipeline import AssembledSequence
from changewatch.pipeline import Window
from changewatch.pipeline import WindowSet

START = parse_date("2020-01-01T00:00:00Z")
"""Start of generated series."""

SeriesMaker = Callable[..., ObservationSeries]


def make_series(
    height: int = 8,
    width: int = 8,
    days: int = 60,
    seed: int = 0,
    cadence: int = 4,
    cloud: float = 0.2,
) -> ObservationSeries:
    """Random series: each mode observed every `cadence` days, offset by a day."""
    rng = np.random.default_rng(seed)
    series = ObservationSeries(Scene(height, width))
    for m, mode in enumerate(MODES):
        for day in range(m, days, cadence):
            data = rng.random((mode.bands, height, width)).astype(np.float32)
            mask = None
            if mode is Mode.OPT:
                mask = (rng.random((height, width)) >= cloud).astype(np.uint8)
            timestamp = START + timedelta(days=day, hours=m)
            series[mode].append(Observation(mode, timestamp, data, mask))
    return series


def window_set(
    count: int, tile: TileId = (0, 0), size: int = 6, seed: int = 0
) -> WindowSet:
    """`count` three-frame windows over random frames two days apart."""
    rng = np.random.default_rng(seed)
    frames = rng.random((count + 2, 17, size, size)).astype(np.float32)
    stamps = [START + timedelta(days=2 * k) for k in range(count + 2)]
    seq = AssembledSequence(stamps, frames, np.ones((count + 2, 3), dtype=bool))
    windows = [Window(stamps[k], k, k + 3) for k in range(count)]
    return WindowSet(tile, seq, windows)


@pytest.fixture
def series_maker() -> SeriesMaker:
    """Factory for random observation series."""
    return make_series


@pytest.fixture
def tiny() -> Topology:
    """A topology small enough for gradient checks."""
    return Topology(filters=(2, 2, 3, 3, 2), dropout=0.4)
