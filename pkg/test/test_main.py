"""End-to-end tests."""

# std
from pathlib import Path
from shlex import split
from unittest.mock import MagicMock
from unittest.mock import patch
import json

# lib
import pytest

# pkg
from changewatch.__main__ import main


def test_arg_bad() -> None:
    """Bad args."""
    assert main(split("changewatch")) == 1, "missing command"
    assert main(split("changewatch --unknown")) == 1, "unknown arg"
    assert main(split("changewatch fly")) == 1, "unknown command"


def test_arg_general(capsys: pytest.CaptureFixture[str]) -> None:
    """General args."""
    assert main(split("changewatch --debug --version")) == 0, "--version"
    assert "checkpoint format 1" in capsys.readouterr().out
    assert main(split("changewatch --debug --help")) == 0, "--help"
    assert "param-count" in capsys.readouterr().out


def test_param_count(capsys: pytest.CaptureFixture[str]) -> None:
    """Print the parameter count of the configured topology."""
    assert main(split("changewatch param-count")) == 0
    assert capsys.readouterr().out.strip() == "71401"


def test_bad_config(tmp_path: Path) -> None:
    """Invalid configuration is a usage error."""
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"colour": "red"}))
    assert main(split(f"changewatch param-count -c {path}")) == 1
    assert main(split(f"changewatch stack -c {tmp_path / 'nowhere.json'}")) == 1
    assert main(split("changewatch stack")) == 1, "missing bundle"


def test_data_error(tmp_path: Path) -> None:
    """Unreadable inputs fail with exit code 2."""
    assert main(split(f"changewatch stack --bundle {tmp_path} -o {tmp_path}/out")) == 2


@patch("changewatch.__main__.DISPATCH")
def test_dispatch(_dispatch: MagicMock) -> None:
    """Errors raised by subcommands map to exit codes."""
    command = _dispatch.__getitem__.return_value
    assert main(split("changewatch transfer --seed 4")) == 0
    args, config = command.call_args[0]
    assert args.command == "transfer" and config.seed == 4

    command.side_effect = RuntimeError("non-finite loss")
    assert main(split("changewatch transfer")) == 2
    command.side_effect = OSError("disk full")
    assert main(split("changewatch transfer")) == 2
