import hashlib
import json

import pytest

from weathermoe import cli
from weathermoe.evalrep import parse_results_csv

TINY = """\
[dataset]
per_class = 4

[classifier]
epochs = 1

[stage1]
epochs = 1
baseline_extra_epochs = 1
gt_sample = 1

[stage4]
epochs = 1

[paths]
workdir = work
"""

PIPELINE = ("gen", "train-stage1", "train-classifier", "train-moe", "eval", "report")


def _run(verb, cfg, seed=7):
    return cli.main([verb, "--config", str(cfg), "--seed", str(seed)])


def _error_line(capsys):
    lines = [ln for ln in capsys.readouterr().err.splitlines() if ln.startswith("{")]
    assert len(lines) == 1
    return json.loads(lines[0])


def _digest(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.suffix in (".ckpt", ".csv", ".svg", ".json"):
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


@pytest.fixture(scope="module")
def tiny_runs(tmp_path_factory):
    roots = []
    for name in ("a", "b"):
        root = tmp_path_factory.mktemp(name)
        (root / "run.ini").write_text(TINY)
        codes = [_run(v, root / "run.ini") for v in PIPELINE]
        roots.append((root, codes))
    return roots


def test_pipeline_exits_zero_and_writes_artifacts(tiny_runs):
    root, codes = tiny_runs[0]
    assert codes == [0] * len(PIPELINE)
    work = root / "work"
    for name in ("stage1.ckpt", "baseline.ckpt", "classifier.ckpt", "pfr.ckpt", "moe.ckpt", "eval.json",
                 "report/results.csv", "report/confusion.csv", "report/ap_3d_30.svg"):
        assert (work / name).is_file(), name
    res = parse_results_csv((work / "report/results.csv").read_text())
    assert set(res) == {"baseline", "moe"}


def test_two_runs_are_byte_identical(tiny_runs):
    (a, _), (b, _) = tiny_runs
    da, db = _digest(a / "work"), _digest(b / "work")
    assert da == db and len(da) >= 10


def test_missing_prerequisite_gives_json_error(tmp_path, capsys):
    (tmp_path / "run.ini").write_text(TINY)
    assert _run("train-moe", tmp_path / "run.ini") == 1
    err = _error_line(capsys)
    assert err["verb"] == "train-moe" and err["error"] == "FileNotFoundError" and "dataset" in err["message"]


def test_bad_config_and_seed(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[inference]\nrouting = coin\n")
    assert _run("gen", bad) == 1
    assert "routing" in _error_line(capsys)["message"]
    assert cli.main(["gen", "--config", str(bad), "--seed", "-3"]) == 1
    assert _error_line(capsys)["verb"] == "gen"
    assert cli.main(["gen", "--config", str(bad), "--seed", str(2 ** 64)]) == 1
    _error_line(capsys)
    assert cli.main(["frobnicate"]) == 1
    assert _error_line(capsys)["verb"] == "?"


def test_selftest_verb(tmp_path, capsys):
    (tmp_path / "run.ini").write_text(TINY)
    assert _run("selftest", tmp_path / "run.ini", seed=1) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 8 and "FAIL" not in out


def test_config_defaults_and_relative_workdir(tmp_path):
    from weathermoe.config import load_config
    (tmp_path / "c.ini").write_text("[dataset]\nper_class = 10\n")
    cfg = load_config(tmp_path / "c.ini")
    assert cfg.dataset.per_class == 10 and cfg.workdir == tmp_path / "run"
    assert cfg.stage4["k"] == 1 and cfg.inference["routing"] == "iwr"
