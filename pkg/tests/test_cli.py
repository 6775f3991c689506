import json
import subprocess
import sys

import pytest

from aullm.cli import run

TINY = """version = 1
seed = 5
synthetic.num_subjects = 2
synthetic.clips_per_subject = 3
trainer.epochs = 1
trainer.batch_size = 4
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert run(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    return root, cfg


def _snapshot(path):
    return {p.relative_to(path): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_gen_data_creates_manifest_and_clips(workspace):
    root, _ = workspace
    data = root / "data"
    manifest = json.loads((data / "manifest.json").read_text())
    assert len(manifest["samples"]) == 6
    assert (data / "labels.csv").exists()


def test_eval_loso_writes_reports_and_leaves_data_alone(workspace, capsys):
    root, cfg = workspace
    before = _snapshot(root / "data")
    out = root / "loso1"
    assert run(["eval-loso", "--config", str(cfg), "--data", str(root / "data"), "--out", str(out)]) == 0
    for name in ("report.json", "report.csv", "per_au_f1.png", "config.resolved.cfg"):
        assert (out / name).exists(), name
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("eval-loso protocol=loso") and "macro_f1=" in line and "wall=" in line
    assert _snapshot(root / "data") == before


def test_eval_loso_is_byte_reproducible(workspace):
    root, cfg = workspace
    outs = [root / "rep_a", root / "rep_b"]
    for out in outs:
        assert run(["eval-loso", "--config", str(cfg), "--data", str(root / "data"), "--out", str(out)]) == 0
    for name in ("report.json", "report.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_train_and_graph_inspect(workspace):
    root, cfg = workspace
    out = root / "train"
    assert run(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(out)]) == 0
    assert (out / "model.pt").exists() and (out / "train_log.csv").exists()
    gi = root / "graph"
    assert run(["graph-inspect", "--config", str(cfg), "--checkpoint", str(out / "model.pt"),
                "--data", str(root / "data"), "--out", str(gi)]) == 0
    blob = json.loads((gi / "graph.json").read_text())
    assert len(blob["a_prior"]) == 8 and len(blob["a_hat"]) == 8


def test_crossdomain_and_report(workspace):
    root, cfg = workspace
    out = root / "cross"
    assert run(["eval-crossdomain", "--config", str(cfg), "--source", str(root / "data"), "--out", str(out)]) == 0
    assert json.loads((out / "report.json").read_text())["protocol"] == "crossdomain"
    rep = root / "rerender"
    assert run(["report", str(out / "report.json"), "--out", str(rep)]) == 0
    assert (rep / "crossdomain_heatmap.png").exists() and (rep / "report.csv").exists()


def test_ablate_labels_rows(workspace):
    root, cfg = workspace
    out = root / "ablate"
    assert run(["ablate", "--config", str(cfg), "--data", str(root / "data"), "--out", str(out),
                "--axes", "full,ccr_enabled=false"]) == 0
    rows = (out / "ablation.csv").read_text().splitlines()
    assert rows[0] == "axis,variant,macro_f1"
    assert rows[1].startswith("full,Full Framework (AULLM++),") and rows[2].startswith("ccr_enabled=false,w/o CCR++,")


def test_gradcheck_single_module(capsys):
    assert run(["gradcheck", "--module", "r-augnn", "--seed", "3"]) == 0
    out = capsys.readouterr().out
    assert "max_rel_error=" in out and "PASS" in out


@pytest.mark.parametrize("argv", [
    ["bogus-verb"],
    [],
    ["gradcheck", "--set", "trainer.epochs=0"],
    ["gradcheck", "--set", "trainer.nope=1"],
    ["gradcheck", "--set", "trainer.epochs=2", "--set", "trainer.epochs=3"],
    ["gradcheck", "--seed", "1", "--set", "seed=2"],
])
def test_usage_and_config_errors_exit_2(argv):
    assert run(argv) == 2


def test_missing_config_exits_2(tmp_path):
    assert run(["gen-data", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path / "d")]) == 2


def test_conflicting_flags_exit_2(workspace):
    root, cfg = workspace
    data = str(root / "data")
    assert run(["eval-loso", "--config", str(cfg), "--data", data, "--out", data + "/inside"]) == 2
    assert run(["eval-loso", "--config", str(cfg), "--data", data, "--out", str(root / "j"), "--jobs", "0"]) == 2
    assert run(["eval-loso", "--config", str(cfg), "--data", data, "--out", str(root / "j"),
                "--aggregation", "pooled", "--set", "eval.aggregation=per_fold"]) == 2
    assert run(["ablate", "--config", str(cfg), "--data", data, "--out", str(root / "k"), "--axes", "warp"]) == 2


def test_runtime_failure_exits_1(tmp_path):
    assert run(["eval-loso", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "aullm.cli", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr
