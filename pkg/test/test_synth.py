"""Test synthetic scenes."""

# std
from pathlib import Path
import json

# lib
import numpy as np
import pytest

# pkg
from changewatch.ingest import Mode
from changewatch.ingest import validate_series
from changewatch.synth import change_raster
from changewatch.synth import ChangeEvent
from changewatch.synth import CLOUD
from changewatch.synth import default_scenario
from changewatch.synth import generate_labels
from changewatch.synth import generate_scene
from changewatch.synth import ScenarioSpec


def small(**changes: object) -> ScenarioSpec:
    """A 16x16 scene over 60 days with one change from day 20."""
    values = dict(
        height=16,
        width=16,
        duration=60,
        tile=8,
        events=[ChangeEvent(row=4, col=4, height=6, width=6, start=20, ramp=10)],
    )
    values.update(changes)
    return ScenarioSpec(**values)  # type: ignore[arg-type]


def test_default_scenario() -> None:
    """Seeded events inside the scene and the 150-600 day range."""
    spec = default_scenario(seed=3)
    assert spec.check() is spec
    assert len(spec.events) == 12
    assert [e.kind for e in spec.events[:4]] == ["construction", "destruction"] * 2
    assert all(150 <= e.start <= 600 and 20 <= e.ramp <= 60 for e in spec.events)
    assert all(6 <= e.height <= 14 for e in spec.events)
    assert default_scenario(seed=3) == spec
    assert default_scenario(seed=4) != spec
    assert len(default_scenario(events=2).events) == 2


def test_days() -> None:
    """Acquisitions follow cadence and phase."""
    spec = ScenarioSpec()
    asc = spec.days(Mode.SAR_ASC)
    assert len(asc) == 122
    assert asc[0] == pytest.approx(16 / 24) and asc[1] - asc[0] == pytest.approx(6)
    assert len(spec.days(Mode.OPT)) == 183
    assert max(spec.days(Mode.SAR_DSC)) < 730


def test_event() -> None:
    """Progress ramps linearly; activity is an interval intersection."""
    event = ChangeEvent(0, 0, 2, 2, start=100, ramp=20)
    assert [event.progress(d) for d in (90, 100, 110, 120, 200)] == [0, 0, 0.5, 1, 1]
    assert event.active(0, 100) and event.active(120, 200) and event.active(105, 110)
    assert not event.active(0, 99) and not event.active(121, 300)
    assert ChangeEvent.from_dict(event.asdict()) == event
    data = dict(row=0, col=0, height=1, width=1, start=5, kind="destruction")
    destruction = ChangeEvent.from_dict(data)
    assert destruction.sar < 0


def test_issues() -> None:
    """Invalid scenarios are reported."""
    spec = small(cloud_probability=1.0, looks=-1)
    spec.events.append(ChangeEvent(row=12, col=0, height=6, width=2, start=0))
    issues = spec.find_issues()
    assert len(issues) == 3
    assert any("event 1 outside scene" in i for i in issues)
    with pytest.raises(ValueError, match="invalid scenario"):
        generate_scene(spec)


def test_file(tmp_path: Path) -> None:
    """Scenarios round trip through JSON."""
    spec = default_scenario(seed=1, events=3)
    path = spec.save(tmp_path / "scenario.json")
    assert ScenarioSpec.load(path) == spec
    assert json.loads(path.read_text())["start"] == "2020-01-01T00:00:00Z"

    path.write_text(json.dumps({"height": 8, "colour": "red"}))
    with pytest.raises(ValueError, match="unknown scenario keys: colour"):
        ScenarioSpec.load(path)
    path.write_text(json.dumps({"events": [{"row": 1}]}))
    with pytest.raises(ValueError, match="malformed"):
        ScenarioSpec.load(path)
    path.write_text("{")
    with pytest.raises(ValueError, match="corrupt"):
        ScenarioSpec.load(path)


def test_generate_scene() -> None:
    """Scenes are valid, seeded and show their changes."""
    spec = small()
    series = generate_scene(spec, seed=1)
    assert validate_series(series) == []
    assert series.counts() == {
        Mode.SAR_ASC: len(spec.days(Mode.SAR_ASC)),
        Mode.SAR_DSC: len(spec.days(Mode.SAR_DSC)),
        Mode.OPT: len(spec.days(Mode.OPT)),
    }
    assert generate_scene(spec, seed=1)[Mode.OPT] == series[Mode.OPT]

    other = generate_scene(spec, seed=1, sar_seed=9)
    assert other[Mode.OPT] == series[Mode.OPT]
    assert other[Mode.SAR_ASC] != series[Mode.SAR_ASC]

    for obs in series[Mode.OPT]:
        cloudy = obs.mask == 0
        assert np.allclose(obs.data[:, cloudy], CLOUD)


def test_change_signal() -> None:
    """Changed pixels differ from the background once the ramp completes."""
    spec = small(
        cloud_probability=0.0, optical_noise=0.0, looks=0, seasonal_amplitude=0.0
    )
    series = generate_scene(spec)
    opt = series[Mode.OPT]
    before, after = opt[0].data, opt[-1].data
    inside = (slice(None), slice(4, 10), slice(4, 10))
    offset = np.asarray(spec.events[0].optical)[:, None, None]
    assert np.allclose(after[inside] - before[inside], offset, atol=1e-6)
    assert np.array_equal(after[:, :4], before[:, :4])

    sar = series[Mode.SAR_ASC]
    delta = sar[-1].data[0, 4:10, 4:10] - sar[0].data[0, 4:10, 4:10]
    assert np.allclose(delta, 0.15, atol=1e-6)
    assert np.array_equal(sar[-1].data[:, 12:], sar[0].data[:, 12:])


def test_speckle() -> None:
    """Speckle is mean-one multiplicative noise with variance 1 / looks."""
    spec = ScenarioSpec(height=8, width=8, duration=1200, looks=4)
    clean = ScenarioSpec(height=8, width=8, duration=1200, looks=0)
    noisy = np.stack([o.data for o in generate_scene(spec, seed=3)[Mode.SAR_ASC]])
    background = generate_scene(clean)[Mode.SAR_ASC][0].data
    assert len(noisy) == 200

    ratio = noisy / background
    per_pixel = ratio.mean(axis=0)
    assert abs(per_pixel.mean() - 1) < 0.01
    assert np.abs(per_pixel - 1).max() < 0.2
    assert ratio.var() == pytest.approx(1 / 4, rel=0.1)


def test_labels() -> None:
    """Labels tile the change raster on the training grid."""
    spec = small()
    labels = generate_labels(spec)
    assert [t.tile for t in labels] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert sum(t.dataset == "testing" for t in labels) == 1
    assert all(t.label.shape == (8, 8) for t in labels)
    total = sum(float(t.label.sum()) for t in labels)
    assert total == change_raster(spec, 0, 60).sum() == 36

    assert sum(float(t.label.sum()) for t in generate_labels(spec, 40, 60)) == 0
    with pytest.raises(ValueError, match="empty period"):
        change_raster(spec, 10, 10)
