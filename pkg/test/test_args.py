"""Test arg parsing and run configuration."""

# std
from pathlib import Path
from shlex import split
import json

# lib
import pytest

# pkg
from changewatch.args import Args
from changewatch.args import RunConfig
from changewatch.args import UsageError
from changewatch.model import Topology
from changewatch.pipeline import INF


def test_empty() -> None:
    """Empty args."""
    assert Args.parse([]) == Args()


def test_basic() -> None:
    """Command, paths and repeatable options."""
    assert Args.parse(
        split("eval --pred out/pred -x 43:18 --exclude 1:2 --labels l.json --baseline")
    ) == Args(
        command="eval",
        pred=Path("out/pred"),
        exclude=[(43, 18), (1, 2)],
        labels=Path("l.json"),
        baseline=True,
    )
    assert Args.parse(split("ablate --delta 120 --delta inf --variant 2")) == Args(
        command="ablate", delta=[120.0, INF], variant=[2]
    )
    assert Args.parse(split("-h --debug")) == Args(help=True, debug=True)


def test_bad_arg() -> None:
    """Bad or missing arg."""
    with pytest.raises(UsageError, match="Unknown option"):
        Args.parse(["--unknown"])
    with pytest.raises(UsageError, match="Unknown command"):
        Args.parse(["fly"])
    with pytest.raises(UsageError, match="Unexpected argument"):
        Args.parse(["eval", "trace"])
    with pytest.raises(UsageError, match="Expected argument"):
        Args.parse(["--seed"])
    with pytest.raises(UsageError, match="Bad value for --pixel"):
        Args.parse(["--pixel", "12"])
    with pytest.raises(UsageError, match="Bad value for --delta"):
        Args.parse(["--delta", "0"])


def test_defaults() -> None:
    """Default config derives the documented parameters."""
    config = RunConfig()
    params = config.pipeline()
    assert (params.delta, params.period, params.overlap) == (2, 183, 0)
    inference = config.pipeline(inference=True)
    assert (inference.tile_y, inference.overlap) == (93, 8)
    assert config.transfer().learning_rate == 0.008
    assert config.topology() == Topology()
    assert config.monitor() == (None, None)

    assert RunConfig(delta_days=None).delta == INF
    desk = RunConfig.desk(seed=2)
    assert (desk.variants, desk.offset_max, desk.seed) == (2, 24, 2)


def test_validation() -> None:
    """Unknown and malformed keys are reported together."""
    issues = RunConfig.find_issues(
        {
            "seed": "x",
            "colour": 1,
            "filters": [1, 2],
            "monitor_end": "soon",
            "stride": 2,
        }
    )
    assert issues == {
        "unknown": ["colour"],
        "malformed": ["seed", "filters", "monitor_end"],
    }
    assert RunConfig.find_issues({"delta_days": "inf", "bundle": "b"}) == {
        "unknown": [],
        "malformed": [],
    }
    assert RunConfig.from_dict({"delta_days": "inf"}).delta == INF
    with pytest.raises(UsageError, match="unknown: colour"):
        RunConfig.from_dict({"colour": 1})
    with pytest.raises(UsageError, match="invalid pipeline config"):
        RunConfig(min_window=100).pipeline()
    with pytest.raises(UsageError, match="invalid transfer config"):
        RunConfig(momentum=1.5).transfer()
    with pytest.raises(UsageError, match="missing config keys: bundle, labels"):
        RunConfig().require("bundle", "labels", "run_dir")


def test_file(tmp_path: Path) -> None:
    """Config files round trip; bad files are usage errors."""
    config = RunConfig(bundle="b", seed=7, monitor_start="2021-01-01T00:00:00Z")
    path = config.save(tmp_path / "config.json")
    again = RunConfig.load(path)
    assert again == config
    assert again.digest() == config.digest()
    assert RunConfig(seed=8).digest() != config.digest()
    assert again.monitor()[0] is not None and again.monitor()[0].year == 2021

    with pytest.raises(UsageError, match="missing config file"):
        RunConfig.load(tmp_path / "nowhere.json")
    (tmp_path / "bad.json").write_text("[1, 2]")
    with pytest.raises(UsageError, match="JSON object"):
        RunConfig.load(tmp_path / "bad.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(UsageError, match="corrupt"):
        RunConfig.load(tmp_path / "bad.json")


def test_resolve(tmp_path: Path) -> None:
    """Flags override the config file."""
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"seed": 3, "epochs": 5, "threads": 2, "bundle": "x"}))
    config = Args.parse(split(f"transfer -c {path} --epochs 7 --bundle y")).resolve()
    assert (config.seed, config.epochs, config.threads, config.bundle) == (3, 7, 2, "y")

    config = Args.parse(split("transfer --run r --threads 3")).resolve()
    assert (config.run_dir, config.threads) == ("r", 3)
