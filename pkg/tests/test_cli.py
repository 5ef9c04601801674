import json

import pytest

from icgp.cli import main
from icgp.dataset import read_jsonl

from test_experiments import TINY


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def test_stage_by_stage_equals_run(cfg_file, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(cfg_file), "--out", str(a)]) == 0
    assert "transformer-N3" in capsys.readouterr().out
    for stage in ("collect", "train", "infer", "eval"):
        assert main([stage, "--config", str(cfg_file), "--out", str(b)]) == 0
    for name in ("dataset.jsonl", "curves.csv", "ckpt-N3-seed0-min.bin", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_errors_exit_with_code_two(cfg_file, tmp_path, capsys):
    assert main(["infer", "--config", str(cfg_file), "--out", str(tmp_path / "x")]) == 2
    assert "ckpt-N2" in capsys.readouterr().err
    assert main(["train", "--config", str(cfg_file), "--out", str(tmp_path / "y")]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("A = 0\n")
    assert main(["collect", "--config", str(bad), "--out", str(tmp_path / "z")]) == 2
    assert main(["run", "--config", str(tmp_path / "nope.cfg")]) == 2


def test_round2_flag_rounds_rewards(cfg_file, tmp_path):
    out = tmp_path / "r"
    assert main(["collect", "--config", str(cfg_file), "--out", str(out), "--round2"]) == 0
    rewards = [st.r for rec in read_jsonl(out / "dataset.jsonl") for st in rec.steps]
    assert rewards and all(r == round(r, 2) for r in rewards)


def test_realize_check_exit_codes(tmp_path):
    out = tmp_path / "rc"
    assert main(["realize-check", "--out", str(out), "--trials", "3"]) == 0
    rep = json.loads((out / "realize-report.json").read_text())
    assert rep["passed"]
    assert main(["realize-check", "--out", str(out), "--trials", "3", "--perturb"]) == 1
    assert not json.loads((out / "realize-report.json").read_text())["passed"]
    assert main(["realize-check", "--out", str(out), "--trials", "0"]) == 0
