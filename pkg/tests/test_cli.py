import json
import subprocess
import sys

import pytest

from moe_sc import cli
from moe_sc import evaluate as ev

TINY_MODEL = ["--set", "model.n_layers=1", "--set", "model.d_model=16", "--set", "model.n_heads=2",
              "--set", "model.n_experts=2", "--set", "model.d_ff=16"]
TINY_RUN = TINY_MODEL + ["--set", "corpus.n_train=8", "--set", "corpus.n_eval=4",
                         "--set", "train.epochs_phase1=1", "--set", "train.epochs_phase2=1",
                         "--set", "train.batch_size=8", "--set", "train.warmup_steps=2"]


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert run("train-phase1", "--out-dir", out / "p1", *TINY_RUN) == 0
    assert run("train-phase2", "--out-dir", out / "p2", "--checkpoint", out / "p1" / "phase1.ckpt", *TINY_RUN) == 0
    return out


def test_gen_corpus(tmp_path):
    assert run("gen-corpus", "--out-dir", tmp_path, "--set", "corpus.n_train=3", "--set", "corpus.n_eval=2") == 0
    lines = (tmp_path / "corpus.jsonl").read_text().splitlines()
    assert len(lines) == 5 * 3 + 7 * 2        # membership counts double
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "gen-corpus"
    assert manifest["outputs"] == ["corpus.jsonl"]
    assert "code_version" in manifest


def test_training_outputs(trained):
    for name in ("phase1.ckpt", "trace_phase1.csv", "manifest.json"):
        assert (trained / "p1" / name).exists()
    assert (trained / "p2" / "phase2.ckpt").exists()


def test_eval_sweep_writes_csv_and_figure(trained, tmp_path):
    args = ["eval-sweep", "--out-dir", tmp_path, "--checkpoint", trained / "p2" / "phase2.ckpt",
            "--set", "eval.snr_grid=[0, 20]", "--set", "eval.samples_per_point=3"]
    assert run(*args) == 0
    rows = ev.read_csv(tmp_path / "task_sweep.csv")
    assert len(rows) == 2 * 3
    assert (tmp_path / "sweep.png").exists()
    first = (tmp_path / "task_sweep.csv").read_bytes()
    assert run(*args) == 0
    assert (tmp_path / "task_sweep.csv").read_bytes() == first


def test_eval_sweep_csv_only(trained, tmp_path):
    assert run("eval-sweep", "--out-dir", tmp_path, "--checkpoint", trained / "p1" / "phase1.ckpt",
               "--set", "eval.snr_grid=[25]", "--set", "eval.samples_per_point=1", "--no-plots") == 0
    assert not (tmp_path / "sweep.png").exists()


def test_ablate_from_config_file(trained, tmp_path):
    cfg = tmp_path / "abl.ini"
    cfg.write_text(
        "[eval]\n"
        "axis = M\n"
        "values = [2, 6]\n"
        f'runs = {{"2": "{trained / "p2" / "phase2.ckpt"}"}}\n'
        "snr_grid = [10]\n"
        "samples_per_point = 2\n")
    assert run("ablate", "--config", cfg, "--out-dir", tmp_path) == 0
    rows = ev.read_csv(tmp_path / "ablation_M.csv")
    assert [r["status"] for r in rows] == ["ok", "missing"]


def test_table1(tmp_path):
    assert run("table1", "--out-dir", tmp_path) == 0
    names = [r["name"] for r in ev.read_csv(tmp_path / "cost_table.csv")]
    assert names == ["check_moe_m10_k1", "check_dense_m1"]


def test_baseline_eval(tmp_path):
    assert run("baseline-eval", "--out-dir", tmp_path, "--set", "baseline.snr_grid=[25]",
               "--set", "baseline.samples_per_point=2", "--set", "baseline.tasks=\"copy\"") == 0
    rows = ev.read_csv(tmp_path / "baseline_sweep.csv")
    assert len(rows) == 1 and rows[0]["n"] == "2"
    assert rows[0]["accuracy"] == ev.GAP


def test_baseline_eval_runs_model_on_recovered_text(trained, tmp_path):
    assert run("baseline-eval", "--out-dir", tmp_path, "--checkpoint", trained / "p1" / "phase1.ckpt",
               "--set", "baseline.snr_grid=[-5, 25]", "--set", "baseline.samples_per_point=3",
               "--set", 'baseline.tasks=["copy", "polarity"]') == 0
    rows = ev.read_csv(tmp_path / "baseline_sweep.csv")
    assert [(r["task"], r["snr_db"]) for r in rows] == [("copy", "-5.000000"), ("polarity", "-5.000000"),
                                                        ("copy", "25.000000"), ("polarity", "25.000000")]
    assert all(0.0 <= float(r["accuracy"]) <= 1.0 for r in rows)


@pytest.mark.parametrize("extra", [["--set", "train.lr=-1"], ["--set", "model.bogus=1"], ["--set", "nodot=1"],
                                   ["--config", "/nonexistent.ini"]])
def test_config_errors_exit_2(tmp_path, extra):
    assert run("train-phase1", "--out-dir", tmp_path, *extra) == 2


def test_unsorted_grid_exit_2(trained, tmp_path):
    assert run("eval-sweep", "--out-dir", tmp_path, "--checkpoint", trained / "p1" / "phase1.ckpt",
               "--set", "eval.snr_grid=[20, 0]") == 2


def test_corrupt_checkpoint_exit_3(trained, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes((trained / "p1" / "phase1.ckpt").read_bytes()[:-4])
    assert run("eval-sweep", "--out-dir", tmp_path, "--checkpoint", bad) == 3


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "moe_sc.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "moe-sc" in proc.stdout
