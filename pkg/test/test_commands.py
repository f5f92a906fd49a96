"""Run the subcommands on a small synthetic scene."""

# std
from pathlib import Path
from shlex import split
from typing import Any
from typing import Dict
import dataclasses
import json

# lib
import numpy as np
import pandas as pd
import pytest

# pkg
from changewatch.__main__ import main
from changewatch.commands import trace_pixels
from changewatch.commands import WindowTrace
from changewatch.ensemble import read_predictions
from changewatch.evaluation import score_dataset
from changewatch.ingest import Mode
from changewatch.ingest import read_bundle
from changewatch.ingest import read_labels
from changewatch.ingest import read_raster
from changewatch.model import load_checkpoint
from changewatch.synth import ChangeEvent
from changewatch.synth import default_scenario
from changewatch.synth import ScenarioSpec
from conftest import START


def small_run(tmp_path: Path) -> Path:
    """Synthesize a 32x32 scene and write a matching config."""
    spec = ScenarioSpec(
        height=32,
        width=32,
        duration=120,
        tile=16,
        cloud_probability=0.2,
        events=[ChangeEvent(row=10, col=10, height=12, width=12, start=40, ramp=20)],
    )
    spec_path = spec.save(tmp_path / "spec.json")
    out = tmp_path / "out"
    assert main(split(f"changewatch synth --spec {spec_path} -o {out}")) == 0

    config: Dict[str, Any] = json.loads((out / "config.json").read_text())
    assert config["center_crop"] == 14
    config.update(
        window_days=20,
        min_window=5,
        max_window=20,
        inference_tile=16,
        overlap=4,
        epochs=2,
        batch_size=2,
        windows_per_tile=2,
        first_window=0,
        offset_min=1,
        offset_max=2,
        folds=3,
        filters=[2, 2, 3, 3, 2],
    )
    path = out / "config.json"
    path.write_text(json.dumps(config))
    return path


def test_trace_pixels() -> None:
    """One row per model, pixel and window."""
    values = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    starts = [START, START.replace(day=3)]
    frame = trace_pixels({"V1": WindowTrace(starts, values)}, [(0, 1), (1, 1)])
    assert frame["value"].tolist() == [1, 5, 3, 7]
    stamps = frame["window_start"].tolist()[:2]
    assert stamps == ["2020-01-01T00:00:00Z", "2020-01-03T00:00:00Z"]
    with pytest.raises(ValueError, match="outside"):
        trace_pixels({"V1": WindowTrace(starts, values)}, [(2, 0)])


def test_pipeline(tmp_path: Path) -> None:
    """synth, stack, windows, transfer, predict, combine, eval, ablate, trace."""
    config = small_run(tmp_path)
    out = config.parent
    run = out / "run"
    labels = read_labels(out / "labels.json")
    assert [t.tile for t in labels] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert sum(t.dataset == "testing" for t in labels) == 1

    assert main(split(f"changewatch stack -c {config} -o {tmp_path / 'stacked'}")) == 0
    stacked = read_bundle(tmp_path / "stacked")
    assert all(o.valid().all() for o in stacked[Mode.OPT])
    assert (tmp_path / "stacked" / "normalization.json").exists()

    assert main(split(f"changewatch windows -c {config}")) == 0
    windows = pd.read_csv(run / "windows.csv")
    assert windows["frames"].between(5, 20).all()
    assert len(windows.groupby(["tile_y", "tile_x"])) == 4

    assert main(split(f"changewatch transfer -c {config} --threads 2")) == 0
    for name in ["V1_best", "V1_last", "V2_best", "baseline"]:
        assert (run / name / "model.bin").exists()
    assert len(json.loads((run / "folds.json").read_text())) == 3
    assert pd.read_csv(run / "V2_trace.csv")["epoch"].tolist() == [1, 2]
    assert load_checkpoint(run / "V1_best").topology.filters == (2, 2, 3, 3, 2)

    assert main(split(f"changewatch predict -c {config} --baseline --mosaic")) == 0
    predictions = read_predictions(run / "predictions")
    assert sorted(predictions) == ["V1", "V2", "baseline", "combined"]
    assert sorted(predictions["combined"]) == [(0, 0), (0, 1), (1, 0), (1, 1)]
    scene = read_raster(run / "predictions" / "combined_mosaic.f32", (32, 32))
    assert ((scene > 0) & (scene < 1)).all()

    pred = run / "predictions"
    command = f"changewatch combine -c {config} --pred {pred} --variant 1"
    assert main(split(command)) == 0
    combined = read_predictions(pred)["combined"]
    assert np.allclose(combined[(0, 0)], predictions["V1"][(0, 0)], atol=1e-6)

    assert main(split(f"changewatch eval -c {config} -x 0:0")) == 0
    metrics = json.loads((pred / "metrics.json").read_text())
    assert {m["model"] for m in metrics} == {"V1", "V2", "baseline", "combined"}
    assert {m["dataset"] for m in metrics} == {"all-0_0"}
    assert {m["pixels"] for m in metrics} == {3 * 14 * 14}
    truth = {t.tile: t.label for t in labels}
    v1 = score_dataset(predictions["V1"], truth, 14, [(0, 0)])
    record = next(m for m in metrics if m["model"] == "V1")
    assert record["roc_auc"] == pytest.approx(v1.roc.auc)
    assert (pred / "V1_all-0_0_kappa.csv").exists()

    cmd = f"changewatch ablate -c {config} --delta 20 --delta inf"
    assert main(split(cmd)) == 0
    ablation = pd.read_csv(run / "ablation" / "ablation.csv", dtype={"delta_days": str})
    assert len(ablation) == 7 * 3
    assert set(ablation["delta_days"]) == {"2", "20", "inf"}

    cmd = f"changewatch trace -c {config} --pixel 5:5 --pixel 20:30 --variant 2"
    assert main(split(cmd)) == 0
    traced = pd.read_csv(run / "trace.csv")
    assert set(traced["tile"]) == {"0:0", "1:1"}
    assert set(zip(traced["y"], traced["x"])) == {(5, 5), (20, 30)}
    assert set(traced["model"]) == {"V2"}

    assert main(split(f"changewatch trace -c {config}")) == 1
    assert main(split(f"changewatch trace -c {config} --pixel 40:0")) == 2
    assert main(split(f"changewatch predict -c {config} --variant 9")) == 1


def test_transfer_reproducible(tmp_path: Path) -> None:
    """Same config and seed write byte-identical checkpoints and folds."""
    config = small_run(tmp_path)
    runs = [tmp_path / "first", tmp_path / "second"]
    for run, threads in zip(runs, [1, 2]):
        cmd = f"changewatch transfer -c {config} --run {run} --threads {threads}"
        assert main(split(cmd)) == 0
    for name in ["folds.json", "normalization.json", "V1_best/model.bin"]:
        assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes(), name


@pytest.mark.slow
def test_synthetic_transfer(tmp_path: Path) -> None:
    """Two desk-scale variants detect the injected changes on held-out tiles."""
    out = tmp_path / "out"
    assert main(split(f"changewatch synth -o {out}")) == 0
    config = out / "config.json"
    assert main(split(f"changewatch transfer -c {config} --threads 4")) == 0
    assert main(split(f"changewatch predict -c {config} --threads 4")) == 0
    assert main(split(f"changewatch eval -c {config} --dataset testing")) == 0

    metrics = json.loads((out / "run" / "predictions" / "metrics.json").read_text())
    auc = {m["model"]: m["roc_auc"] for m in metrics}
    assert auc["combined"] >= 0.85
    assert auc["combined"] >= max(auc["V1"], auc["V2"]) - 0.02


@pytest.mark.slow
def test_optical_signature_ablation(tmp_path: Path) -> None:
    """Freezing the optical mode hurts more when changes only show optically."""
    spec = default_scenario()
    spec.events = [dataclasses.replace(e, sar=0.0) for e in spec.events]
    spec_path = spec.save(tmp_path / "spec.json")
    out = tmp_path / "out"
    assert main(split(f"changewatch synth --spec {spec_path} -o {out}")) == 0
    config = out / "config.json"
    assert main(split(f"changewatch transfer -c {config} --threads 4")) == 0
    cmd = f"changewatch ablate -c {config} --delta inf --dataset testing"
    assert main(split(cmd)) == 0

    table = pd.read_csv(
        out / "run" / "ablation" / "ablation.csv", dtype={"delta_days": str}
    )
    combined = table[table["model"] == "combined"]
    auc = {(r.mode_axis, r.delta_days): r.roc_auc for r in combined.itertuples()}
    reference = next(v for (axis, delta), v in auc.items() if delta != "inf")
    assert auc[("both", "inf")] <= 0.65
    drop_opt = reference - auc[("opt", "inf")]
    drop_sar = reference - auc[("sar", "inf")]
    assert drop_opt > drop_sar
