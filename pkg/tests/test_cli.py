import csv
import io
import subprocess
import sys
from pathlib import Path

import pytest

import railnet
from railnet.cli import build_parser, run

DATA = Path(railnet.__file__).parent / "data"
TOPO = str(DATA / "default_topology.json")
DIST = str(DATA / "default_disturbance.json")
FAST = ["--max-epochs", "2", "--hidden", "8", "--layers", "2"]


def pipeline(root: Path, seed: int = 7):
    assert run(["simulate", "--topology", TOPO, "--disturbance", DIST, "--days", "3", "--seed", str(seed),
                "--out", str(root / "records.csv")]) == 0
    assert run(["snapshot", "--records", str(root / "records.csv"), "--topology", TOPO, "--interval", "20",
                "--start", "08:00", "--end", "23:00", "--max-delay", "90", "--out", str(root / "graphs.jsonl")]) == 0
    assert run(["train", "--graphs", str(root / "graphs.jsonl"), "--split", "60/20/20", "--model", "sage-het",
                "--seed", str(seed), "--out", str(root / "run1")] + FAST) == 0
    assert run(["eval", "--run", str(root / "run1"), "--subset", "delayed"]) == 0
    assert run(["report", "--run", str(root / "run1")]) == 0


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    pipeline(a)
    pipeline(b)
    return a, b


def test_pipeline_outputs(pipeline_dirs):
    root, _ = pipeline_dirs
    run_dir = root / "run1"
    for name in ("params.bin", "history.csv", "split.json", "run.json", "metrics.csv", "predictions.csv",
                 "residual_hist.csv", "residual_cdf.csv"):
        assert (run_dir / name).is_file(), name
    assert (root / "graphs.jsonl.meta.json").is_file()
    rows = list(csv.DictReader(io.StringIO((run_dir / "metrics.csv").read_text())))
    assert list(rows[0]) == ["model", "horizon", "mode", "subset", "mae", "rmse", "n_samples", "seed"]
    assert rows[0]["subset"] == "delayed" and rows[0]["seed"] == "7"
    assert float(rows[0]["rmse"]) >= float(rows[0]["mae"])
    hist = list(csv.DictReader(io.StringIO((run_dir / "history.csv").read_text())))
    assert list(hist[0]) == ["epoch", "train_mae", "val_mae", "lr"] and len(hist) == 2


def test_reruns_are_bit_identical(pipeline_dirs):
    a, b = pipeline_dirs
    for rel in ("records.csv", "graphs.jsonl", "graphs.jsonl.meta.json", "run1/params.bin", "run1/history.csv",
                "run1/metrics.csv", "run1/predictions.csv", "run1/residual_cdf.csv", "run1/split.json"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_ablate_and_horizon(tmp_path, pipeline_dirs):
    root, _ = pipeline_dirs
    assert run(["ablate", "--graphs", str(root / "graphs.jsonl"), "--mode", "cut", "--threshold", "3",
                "--seed", "1", "--out", str(tmp_path / "abl")] + FAST) == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "abl" / "metrics.csv").read_text())))
    assert {r["mode"] for r in rows} == {"cut-3", "full"}
    assert "mae_increase_pct" in rows[0]
    assert run(["ablate", "--graphs", str(root / "graphs.jsonl"), "--mode", "cut", "--seed", "1",
                "--out", str(tmp_path / "x")]) != 0
    assert run(["horizon", "--records", str(root / "records.csv"), "--topology", TOPO, "--set", "20,30",
                "--models", "keep-constant,ann", "--seed", "1", "--out", str(tmp_path / "hz")] + FAST) == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "hz" / "metrics.csv").read_text())))
    assert len(rows) == 2 * 2 * 2


def subparsers():
    parser = build_parser()
    action = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    return action.choices


@pytest.mark.parametrize("name", sorted(subparsers()))
def test_help_documents_every_flag(name, capsys):
    sub = subparsers()[name]
    assert run([name, "--help"]) == 0
    text = capsys.readouterr().out
    for action in sub._actions:
        for opt in action.option_strings:
            assert opt in text
        assert action.help, f"{name} {action.option_strings} has no help"


def test_unknown_flag_fails(capsys):
    assert run(["simulate", "--topology", TOPO, "--disturbance", DIST, "--days", "1", "--seed", "1",
                "--out", "x.csv", "--bogus"]) != 0
    assert "usage" in capsys.readouterr().err


def test_seed_is_mandatory():
    assert run(["simulate", "--topology", TOPO, "--disturbance", DIST, "--days", "1", "--out", "x.csv"]) != 0


def test_missing_input_reports_error(tmp_path, capsys):
    assert run(["snapshot", "--records", str(tmp_path / "none.csv"), "--topology", TOPO, "--interval", "20",
                "--out", str(tmp_path / "g.jsonl")]) == 1
    assert "not found" in capsys.readouterr().err


def test_bad_split_rejected():
    assert run(["train", "--graphs", "g.jsonl", "--split", "70/20/20", "--seed", "1", "--out", "r"]) != 0


def test_console_entry_point(tmp_path):
    env = {"RAILNET_LOG": "INFO", "PATH": ""}
    out = subprocess.run([sys.executable, "-m", "railnet.cli", "simulate", "--topology", TOPO, "--disturbance", DIST,
                          "--days", "1", "--seed", "3", "--out", str(tmp_path / "r.csv")],
                         capture_output=True, text=True, env=env)
    assert out.returncode == 0
    assert "resolved config" in out.stderr and '"seed": 3' in out.stderr
