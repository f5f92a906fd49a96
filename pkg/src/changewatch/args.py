"""Command-line arguments and run configuration."""

# std
from __future__ import annotations
from datetime import datetime
from pathlib import Path
from typing import Any
from typing import Callable
from typing import Dict
from typing import List
from typing import Optional
from typing import Tuple
import dataclasses
import hashlib
import json
import logging

# pkg
from .ingest import parse_date
from .ingest import parse_tile
from .ingest import TileId
from .model import Topology
from .pipeline import Days
from .pipeline import parse_days
from .pipeline import PipelineParams
from .transfer import TransferConfig
from .workers import DEFAULT_THREADS

log = logging.getLogger(__name__)

Checker = Callable[[Any], bool]
"""Function that takes a config value and returns `True` if it is ok."""

COMMANDS = (
    "synth",
    "stack",
    "windows",
    "transfer",
    "predict",
    "combine",
    "eval",
    "ablate",
    "trace",
    "param-count",
)
"""Subcommands."""

USAGE = f"""changewatch: Deep-temporal urban change monitoring

USAGE

  changewatch <command>
    [--help] [--version] [--debug]
    [--config PATH] [--seed N] [--threads N] [--epochs N]
    [--bundle PATH] [--labels PATH] [--run PATH] [--out PATH]
    [--spec PATH] [--pred PATH] [--variant K]... [--init PATH]
    [--baseline] [--mosaic] [--exclude Y:X]... [--dataset NAME]
    [--delta DAYS]... [--pixel Y:X]...

GENERAL

  -h, --help        Show this help message and exit.
  --version         Show program, bundle and checkpoint format versions.
  --debug           Show debug messages.

COMMANDS

  synth             Generate a synthetic bundle, labels and scenario.json.
  stack             Temporally stack a bundle; write it with its normalization.
  windows           List the windows of every tile (windows.csv).
  transfer          Train transfer variants into the run directory.
  predict           Predict tiles (and optionally a mosaic) for each variant.
  combine           Combine variant predictions by their geometric mean.
  eval              Score predictions against labels (ROC, PR, kappa).
  ablate            Score predictions under stale resampling (ablation.csv).
  trace             Per-window prediction time series of selected pixels.
  param-count       Print the number of network parameters.

CONFIGURATION

  -c PATH, --config PATH
    JSON file with run configuration keys (see changewatch.schema.json).
    Missing keys take their defaults; flags override the file.

  --seed N          Seed for all randomness. [default: 0]
  --threads N       Worker threads for tile-level work.
                    [default: {DEFAULT_THREADS}] [env: CHANGEWATCH_THREADS]
  --epochs N        Training epochs. [default: 160]

PATHS

  --bundle PATH     Observation bundle directory.
  --labels PATH     Label manifest (`labels.json` or its directory).
  --run PATH        Run directory with checkpoints. [default: run]
  -o PATH, --out PATH
                    Output directory (or file for `trace`).
  --spec PATH       Scenario for `synth`. [default: built-in scenario]
  --pred PATH       Prediction directory for `combine` and `eval`.

MODELS

  --variant K       Variant number to train or use; repeatable.
                    [default: 1..variants]
  --init PATH       Checkpoint to transfer from. [default: seeded init]
  --baseline        Also predict with the untransferred starting parameters.
  --mosaic          Also predict overlapping inference tiles and write mosaics.

EVALUATION

  -x Y:X, --exclude Y:X
                    Tile to leave out of scoring; repeatable.
  --dataset NAME    Only score labels tagged NAME (trainval, testing).
  --delta DAYS      Resampling step for `ablate`; repeatable; `inf` allowed.
                    [default: 120, 600, inf]
  --pixel Y:X       Scene pixel for `trace`; repeatable.
"""


def _is_text(value: Any) -> bool:
    return isinstance(value, str)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _is_date(value: Any) -> bool:
    if not isinstance(value, str):
        return False
    if not value:
        return True
    try:
        parse_date(value)
        return True
    except ValueError:
        return False


class UsageError(ValueError):
    """Bad arguments or configuration (exit code 1)."""


@dataclasses.dataclass
class RunConfig:
    """Flat run configuration (`config.json`)."""

    bundle: str = ""
    """Observation bundle directory."""

    labels: str = ""
    """Label manifest."""

    run_dir: str = "run"
    """Run directory."""

    delta_days: Optional[float] = 2
    """Sampling step in days (`null` for inf)."""

    window_days: float = 183
    """Window period in days."""

    min_window: int = 35
    max_window: int = 92
    stride: int = 1
    tile_x: int = 32
    tile_y: int = 32

    overlap: int = 8
    """Overlap of inference tiles."""

    inference_tile: int = 93
    """Side of inference tiles."""

    learning_rate: float = 0.008
    momentum: float = 0.8
    epochs: int = 160
    batch_size: int = 64
    windows_per_tile: int = 10
    first_window: int = 21
    offset_min: int = 40
    offset_max: int = 49
    center_crop: int = 30

    folds: int = 4
    """Cross-validation folds."""

    variants: int = 4
    """Variants trained (the first `variants` folds)."""

    filters: List[int] = dataclasses.field(default_factory=lambda: [10, 10, 26, 26, 8])
    """Filters of the five hidden layers."""

    seed: int = 0
    threads: int = 1

    monitor_start: str = ""
    """Earliest window start used for predictions (empty: no limit)."""

    monitor_end: str = ""
    """Window starts must be before this (empty: no limit)."""

    @staticmethod
    def desk(**changes: Any) -> RunConfig:
        """Settings sized for the synthetic 730-day scenario."""
        desk = TransferConfig.desk()
        values: Dict[str, Any] = dict(
            epochs=desk.epochs,
            batch_size=desk.batch_size,
            offset_min=desk.offset_min,
            offset_max=desk.offset_max,
            variants=2,
        )
        values.update(changes)
        return RunConfig(**values)

    @staticmethod
    def find_issues(data: Dict[str, Any]) -> Dict[str, List[str]]:
        """Return key names by issue (`unknown`, `malformed`)."""
        issues: Dict[str, List[str]] = {"unknown": [], "malformed": []}
        kinds: Dict[str, Checker] = {"str": _is_text, "int": _is_int}
        rules: Dict[str, Checker] = {
            f.name: kinds.get(str(f.type), _is_number)
            for f in dataclasses.fields(RunConfig)
        }
        rules.update(
            {
                "delta_days": lambda v: v is None or v == "inf" or _is_number(v),
                "filters": lambda v: isinstance(v, list)
                and len(v) == 5
                and all(map(_is_int, v)),
                "monitor_start": _is_date,
                "monitor_end": _is_date,
            }
        )
        issues["unknown"] = [name for name in data if name not in rules]
        for name, value in data.items():
            if name in rules and not rules[name](value):
                issues["malformed"].append(name)
        return issues

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> RunConfig:
        """Return config from a `dict`; missing keys take defaults."""
        issues = RunConfig.find_issues(data)
        problems = [
            f"{kind}: {', '.join(names)}" for kind, names in issues.items() if names
        ]
        if problems:
            raise UsageError("invalid config keys (" + "; ".join(problems) + ")")
        values = dict(data)
        if values.get("delta_days") == "inf":
            values["delta_days"] = None
        return RunConfig(**values)

    @staticmethod
    def load(path: Path) -> RunConfig:
        """Read a JSON config file."""
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise UsageError(f"missing config file: {path}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"corrupt config file {path}: {e}") from None
        if not isinstance(data, dict):
            raise UsageError(f"config must be a JSON object: {path}")
        return RunConfig.from_dict(data)

    def require(self, *names: str) -> RunConfig:
        """Raise `UsageError` if any of the path keys `names` is empty."""
        missing = [name for name in names if not getattr(self, name)]
        if missing:
            raise UsageError(f"missing config keys: {', '.join(missing)}")
        return self

    def asdict(self) -> Dict[str, Any]:
        """Return `dict` representation."""
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON of this config."""
        canonical = json.dumps(self.asdict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def save(self, path: Path) -> Path:
        """Write the resolved config as JSON."""
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.asdict(), indent=2))
        log.info(f"write: {path}")
        return path

    @property
    def delta(self) -> Days:
        """Sampling step in days."""
        return parse_days(self.delta_days)

    def pipeline(self, inference: bool = False) -> PipelineParams:
        """Pipeline parameters for training tiles or overlapping inference tiles."""
        params = PipelineParams(
            delta=self.delta,
            period=self.window_days,
            min_window=self.min_window,
            max_window=self.max_window,
            stride=self.stride,
            tile_x=self.inference_tile if inference else self.tile_x,
            tile_y=self.inference_tile if inference else self.tile_y,
            overlap=self.overlap if inference else 0,
        )
        issues = params.find_issues()
        if issues:
            raise UsageError("invalid pipeline config: " + "; ".join(issues))
        return params

    def transfer(self) -> TransferConfig:
        """Training hyperparameters."""
        config = TransferConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            epochs=self.epochs,
            batch_size=self.batch_size,
            windows_per_tile=self.windows_per_tile,
            first_window=self.first_window,
            offset_min=self.offset_min,
            offset_max=self.offset_max,
            center_crop=self.center_crop,
            seed=self.seed,
        )
        issues = config.find_issues()
        if issues:
            raise UsageError("invalid transfer config: " + "; ".join(issues))
        return config

    def topology(self) -> Topology:
        """Network architecture."""
        return Topology(filters=tuple(self.filters))  # type: ignore[arg-type]

    def monitor(self) -> Tuple[Optional[datetime], Optional[datetime]]:
        """Monitoring period of window starts."""
        start = parse_date(self.monitor_start) if self.monitor_start else None
        end = parse_date(self.monitor_end) if self.monitor_end else None
        return start, end


@dataclasses.dataclass
class Args:
    help: bool = False
    """Whether to show usage."""

    version: bool = False
    """Whether to show version."""

    debug: bool = False
    """Whether to show debug messages."""

    command: str = ""
    """Subcommand."""

    # configuration

    config: Optional[Path] = None
    """Path to the JSON config."""

    seed: Optional[int] = None
    """Seed override."""

    threads: Optional[int] = None
    """Worker thread override."""

    epochs: Optional[int] = None
    """Epoch override."""

    # paths

    bundle: Optional[Path] = None
    labels: Optional[Path] = None
    run: Optional[Path] = None
    out: Optional[Path] = None
    spec: Optional[Path] = None
    pred: Optional[Path] = None
    init: Optional[Path] = None

    # models

    variant: List[int] = dataclasses.field(default_factory=list)
    """Variant numbers."""

    baseline: bool = False
    """Whether to include the untransferred parameters."""

    mosaic: bool = False
    """Whether to write full-scene mosaics."""

    # evaluation

    exclude: List[TileId] = dataclasses.field(default_factory=list)
    """Tiles left out of scoring."""

    dataset: str = ""
    """Label dataset tag to score."""

    delta: List[Days] = dataclasses.field(default_factory=list)
    """Ablation steps."""

    pixel: List[TileId] = dataclasses.field(default_factory=list)
    """Scene pixels to trace."""

    def resolve(self) -> RunConfig:
        """Load `--config` (or defaults) and apply flag overrides."""
        config = RunConfig.load(self.config) if self.config else RunConfig()
        overrides: Dict[str, Any] = {
            "seed": self.seed,
            "threads": self.threads,
            "epochs": self.epochs,
            "bundle": self.bundle and str(self.bundle),
            "labels": self.labels and str(self.labels),
            "run_dir": self.run and str(self.run),
        }
        for name, value in overrides.items():
            if value is not None:
                setattr(config, name, value)
        if self.threads is None and not self.config:
            config.threads = DEFAULT_THREADS
        return config

    @staticmethod
    def parse(argv: List[str]) -> Args:
        args = Args()
        alias = {"-h": "--help", "-c": "--config", "-o": "--out", "-x": "--exclude"}
        while argv:
            arg = argv.pop(0)
            if not arg.startswith("-"):
                if args.command:
                    raise UsageError(f"Unexpected argument: {arg}")
                if arg not in COMMANDS:
                    raise UsageError(f"Unknown command: {arg}")
                args.command = arg
                continue
            arg = alias.get(arg, arg)
            prop = arg[2:].replace("-", "_")

            # bool
            if arg in ["--baseline", "--debug", "--help", "--mosaic", "--version"]:
                setattr(args, prop, True)
                continue

            if arg not in OPTIONS:
                raise UsageError(f"Unknown option: {arg}")
            if not argv:
                raise UsageError(f"Expected argument for option: {arg}")
            convert, repeat = OPTIONS[arg]
            value = argv.pop(0)
            try:
                parsed = convert(value)
            except ValueError as e:
                raise UsageError(f"Bad value for {arg}: {value} ({e})") from None
            if repeat:
                getattr(args, prop).append(parsed)
            else:
                setattr(args, prop, parsed)
        return args


OPTIONS: Dict[str, Tuple[Callable[[str], Any], bool]] = {
    # int
    "--seed": (int, False),
    "--threads": (int, False),
    "--epochs": (int, False),
    # str
    "--dataset": (str, False),
    # path
    "--bundle": (Path, False),
    "--config": (Path, False),
    "--init": (Path, False),
    "--labels": (Path, False),
    "--out": (Path, False),
    "--pred": (Path, False),
    "--run": (Path, False),
    "--spec": (Path, False),
    # list
    "--delta": (parse_days, True),
    "--exclude": (parse_tile, True),
    "--pixel": (parse_tile, True),
    "--variant": (int, True),
}
"""Options taking a value: (converter, repeatable)."""
