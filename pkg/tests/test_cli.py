import csv
import json

import pytest

from mtairfl import cli
from mtairfl.fedlearn import load_checkpoint


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _cfg(tmp_path, text):
    p = tmp_path / "cfg.yaml"
    p.write_text(text)
    return str(p)


def test_moment_check_l1_m1(tmp_path):
    cfg = _cfg(tmp_path, "moment_grid: [[1, 1]]\nbits: [continuous]\n")
    out = tmp_path / "out"
    assert cli.main(["lemma-check", "--config", cfg, "--out", str(out), "--trials", "20000"]) == 0
    rows = _rows(out / "stats.csv")
    own = [r for r in rows if r["quantity"] == "own_mean"][0]
    assert float(own["predicted"]) == pytest.approx(0.8862, abs=1e-4)
    assert own["pass"] == "pass"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["kind"] == "lemma-check" and manifest["trials"] == 20000
    assert manifest["config"]["n_tasks"] == 2 and "wall_time_s" in manifest


def test_interference_sweep_outputs(tmp_path):
    cfg = _cfg(tmp_path, "n_tasks: 2\ndevices_per_cluster: 3\nn_shifters_grid: [16, 32, 64, 128]\n"
                         "schemes: [continuous, 2, ro]\n")
    out = tmp_path / "out"
    assert cli.main(["interference-sweep", "--config", cfg, "--out", str(out), "--trials", "500"]) == 0
    sweep = _rows(out / "fig1.csv")
    assert len(sweep) == 12
    assert set(sweep[0]) == {"n_shifters", "scheme", "bits", "power", "stderr"}
    slopes = {r["scheme"]: float(r["slope"]) for r in _rows(out / "slopes.csv")}
    assert set(slopes) == {"continuous", "b2", "ro"}
    assert all(abs(s + 1) < 0.1 for s in slopes.values())


def test_task_sweep_outputs(tmp_path):
    cfg = _cfg(tmp_path, "devices_per_cluster: 6\nn_shifters: 24\nn_tasks_grid: [2, 3, 4]\n")
    out = tmp_path / "out"
    assert cli.main(["task-sweep", "--config", cfg, "--out", str(out), "--trials", "300"]) == 0
    rows = _rows(out / "fig2.csv")
    assert {int(r["n_tasks"]) for r in rows} == {2, 3, 4}


def test_fl_train_outputs(tmp_path):
    cfg = _cfg(tmp_path, "fl_seeds: [0]\nn_shifters_grid: [64]\n")
    out = tmp_path / "out"
    assert cli.main(["fl-train", "--config", cfg, "--out", str(out), "--trials", "3"]) == 0
    summary = _rows(out / "summary.csv")
    assert {r["scheme"] for r in summary} == {"ideal", "aircomp"}
    trace = _rows(out / "trace.csv")
    assert len(trace) == 2 * 2 * 3
    ckpts = sorted((out / "checkpoints").iterdir())
    assert len(ckpts) == 4
    v, meta = load_checkpoint(ckpts[0])
    assert meta["round"] == 3 and v.size == meta["dim"]


def test_rerun_and_manifest_replay_are_identical(tmp_path):
    cfg = _cfg(tmp_path, "n_tasks: 2\ndevices_per_cluster: 2\nn_shifters_grid: [8, 16, 32, 64]\n")
    a, b, c = (tmp_path / x for x in "abc")
    args = ["interference-sweep", "--config", cfg, "--trials", "200", "--seed", "3"]
    assert cli.main(args + ["--out", str(a)]) == 0
    assert cli.main(args + ["--out", str(b)]) == 0
    assert cli.main(["interference-sweep", "--config", str(a / "manifest.json"), "--out", str(c)]) == 0
    for name in ("fig1.csv", "slopes.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes() == (c / name).read_bytes()


def test_quick_flag_scales_trials(tmp_path):
    cfg = _cfg(tmp_path, "moment_grid: [[1, 1]]\nbits: [1]\ntrials: 10000\n")
    out = tmp_path / "out"
    cli.main(["lemma-check", "--config", cfg, "--out", str(out), "--quick"])
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["quick"] is True and manifest["trials"] == 1000


@pytest.mark.parametrize("text", [
    "n_tasks: 3\nn_shifters: 64\n",
    "n_shifters_grid: [64, 128]\n",
    "n_shifters_grid: [64, 102, 128, 256]\nn_tasks: 4\n",
    "snr_db: loud\n",
    "- not a mapping\n",
])
def test_config_errors_exit_1(tmp_path, text, capsys):
    out = tmp_path / "out"
    assert cli.main(["interference-sweep", "--config", _cfg(tmp_path, text), "--out", str(out)]) == 1
    assert "config error" in capsys.readouterr().err
    assert not out.exists()


def test_manifest_kind_mismatch(tmp_path):
    cfg = _cfg(tmp_path, "moment_grid: [[1, 1]]\nbits: [continuous]\n")
    out = tmp_path / "out"
    cli.main(["lemma-check", "--config", cfg, "--out", str(out), "--trials", "1000"])
    assert cli.main(["task-sweep", "--config", str(out / "manifest.json"), "--out", str(tmp_path / "x")]) == 1


def test_runtime_failure_removes_partial_output(tmp_path, monkeypatch):
    def boom(plan, stage):
        (stage / "half.csv").write_text("x\n")
        raise RuntimeError("disk on fire")

    monkeypatch.setitem(cli.RUNNERS, "task-sweep", boom)
    out = tmp_path / "out"
    assert cli.main(["task-sweep", "--out", str(out)]) == 2
    assert list(out.iterdir()) == []


def test_failed_check_exit_3(tmp_path, monkeypatch):
    def failing(plan, stage):
        cli.write_csv(stage / "stats.csv", [{"check": "x", "pass": "fail"}])
        return False

    monkeypatch.setitem(cli.RUNNERS, "check", failing)
    out = tmp_path / "out"
    assert cli.main(["check", "--out", str(out)]) == 3
    assert (out / "stats.csv").exists()
    assert json.loads((out / "manifest.json").read_text())["passed"] is False


def test_unknown_kind_rejected():
    with pytest.raises(SystemExit):
        cli.main(["plot"])
