"""
Tests for the command-line surface: argument helpers, exit codes and subcommands.
"""
import argparse
import json

import pytest

from slimdet.application.training import init_store
from slimdet.domain.errors import (
    DatasetError,
    MalformedLine,
    MissingLabel,
    RatioOutOfRange,
    SizeMismatch,
    UnknownLayerKind,
)
from slimdet.infrastructure.model_repository import FileModelRepository
from slimdet.interface import cli


def test_parse_ratios():
    assert cli.parse_ratios("0.2,0.5") == [0.2, 0.5]
    assert cli.parse_ratios("0.1:0.5:0.2") == [0.1, 0.3, 0.5]
    assert cli.parse_ratios("0.1:0.9:0.1")[-1] == pytest.approx(0.9)
    for bad in ("", "a,b", "0.1:0.5:0"):
        with pytest.raises(argparse.ArgumentTypeError):
            cli.parse_ratios(bad)


def test_parse_ranges():
    assert cli.parse_ranges("0-6,13-16") == [(0, 6), (13, 16)]
    assert cli.parse_ranges("4") == [(4, 4)]
    with pytest.raises(argparse.ArgumentTypeError):
        cli.parse_ranges("x-2")


@pytest.mark.parametrize(
    "error, code",
    [
        (SizeMismatch(10, 8), cli.EXIT_WEIGHTS),
        (MissingLabel("a.png"), cli.EXIT_IO),
        (DatasetError("cannot decode"), cli.EXIT_IO),
        (FileNotFoundError("x"), cli.EXIT_IO),
        (MalformedLine("a.txt", 3), cli.EXIT_INVALID),
        (UnknownLayerKind("dropout"), cli.EXIT_INVALID),
        (RatioOutOfRange(1.5), cli.EXIT_INVALID),
        (RuntimeError("boom"), cli.EXIT_UNEXPECTED),
    ],
)
def test_exit_code(error, code):
    assert cli.exit_code(error) == code


def test_inspect_bundled(capsys):
    assert cli.main(["inspect", "--cfg", "toy"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "total parameters: 82,440" in out


def test_inspect_missing_cfg(tmp_path):
    assert cli.main(["inspect", "--cfg", str(tmp_path / "absent.cfg")]) == cli.EXIT_IO


def test_validate_weights_mismatch(tmp_path, toy_net, capsys):
    weights = tmp_path / "toy.weights"
    FileModelRepository().save_model(
        toy_net, init_store(toy_net, 0), str(tmp_path / "toy.cfg"), str(weights)
    )
    assert cli.main(["validate", "--cfg", "toy", "--weights", str(weights)]) == cli.EXIT_OK
    code = cli.main(["validate", "--cfg", "yolov4-tiny", "--weights", str(weights)])
    assert code == cli.EXIT_WEIGHTS
    assert "SizeMismatch" in capsys.readouterr().out


def test_config_file_supplies_defaults(tmp_path):
    report = tmp_path / "layers.txt"
    config = tmp_path / "run.conf"
    config.write_text(f"# inspect defaults\nreport = {report}\n")
    assert cli.main(["--config", str(config), "inspect", "--cfg", "toy"]) == cli.EXIT_OK
    assert "total parameters" in report.read_text()


def test_config_file_errors(tmp_path):
    assert cli.main(["--config", str(tmp_path / "none.conf"), "inspect", "--cfg", "toy"]) == 4
    bad = tmp_path / "bad.conf"
    bad.write_text("no equals sign here\n")
    assert cli.main(["--config", str(bad), "inspect", "--cfg", "toy"]) == cli.EXIT_INVALID


def test_config_file_sets_global_flags():
    parser = cli.build_parser()
    cli.apply_config_defaults(parser, {"seed": "42", "threads": "3", "floor": "2"})
    args = parser.parse_args(["prune", "--cfg", "toy", "--weights", "w"])
    assert (args.seed, args.threads, args.floor) == (42, 3, 2)
    args = parser.parse_args(["--seed", "7", "prune", "--cfg", "toy", "--weights", "w"])
    assert args.seed == 7


def test_config_file_verbose_reaches_setup(tmp_path):
    config = tmp_path / "run.conf"
    config.write_text("verbose = yes\n")
    seen = []
    cli.main(["--config", str(config), "inspect", "--cfg", "toy"], setup=seen.append)
    assert seen == [True]


def test_unknown_config_key_is_usage_error(tmp_path):
    config = tmp_path / "run.conf"
    config.write_text("seed = 1\nflavour = mint\n")
    with pytest.raises(SystemExit) as info:
        cli.main(["--config", str(config), "inspect", "--cfg", "toy"])
    assert info.value.code == 2


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as info:
        cli.main(["prune", "--cfg", "toy"])
    assert info.value.code == 2


def test_setup_receives_verbose_flag():
    seen = []
    cli.main(["--verbose", "inspect", "--cfg", "toy"], setup=seen.append)
    assert seen == [True]


def test_bad_ratio_is_invalid(tmp_path, toy_net):
    weights = tmp_path / "toy.weights"
    FileModelRepository().save_model(
        toy_net, init_store(toy_net, 0), str(tmp_path / "toy.cfg"), str(weights)
    )
    args = ["prune", "--cfg", "toy", "--weights", str(weights), "--ratio", "1.0"]
    assert cli.main(args) == cli.EXIT_INVALID


@pytest.mark.slow
def test_train_prune_eval_round(tmp_path):
    weights = tmp_path / "trained.weights"
    history = tmp_path / "history.jsonl"
    code = cli.main(
        [
            "train-toy", "--network", "toy", "--epochs", "1", "--batch-size", "2",
            "--synthetic", "4", "--out-weights", str(weights), "--history", str(history),
        ]
    )
    assert code == cli.EXIT_OK
    assert weights.exists() and (tmp_path / "trained.cfg").exists()
    assert len(history.read_text().splitlines()) == 1

    report = tmp_path / "prune.json"
    code = cli.main(
        [
            "prune", "--cfg", str(tmp_path / "trained.cfg"), "--weights", str(weights),
            "--ratio", "0.3", "--out-cfg", str(tmp_path / "pruned.cfg"),
            "--out-weights", str(tmp_path / "pruned.weights"),
            "--format", "json", "--report", str(report),
        ]
    )
    assert code == cli.EXIT_OK
    pruned = json.loads(report.read_text())
    assert pruned["params_after"] < pruned["params_before"]

    model = ["--cfg", str(tmp_path / "pruned.cfg"), "--weights", str(tmp_path / "pruned.weights")]
    assert cli.main(["eval", *model, "--synthetic", "4"]) == cli.EXIT_OK
    assert cli.main(["bench", *model, "--n", "10", "--warmup", "0"]) == cli.EXIT_OK
