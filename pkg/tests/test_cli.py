import json
import subprocess
import sys

import pytest

from hifgl.cli import main, read_config_file


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("HIFGL_DATA_DIR", raising=False)
    assert main(["synth", "--name", "tiny", "--nodes", "90", "--features", "20", "--links", "200",
                 "--classes", "3", "--seed", "1"]) == 0
    return tmp_path


def test_partition_deterministic(workdir, capsys):
    assert main(["partition", "--dataset", "tiny", "--silos", "3", "--seed", "4", "--out", "a.json"]) == 0
    assert main(["partition", "--dataset", "tiny", "--silos", "3", "--seed", "4", "--out", "b.json"]) == 0
    assert (workdir / "a.json").read_bytes() == (workdir / "b.json").read_bytes()
    out = capsys.readouterr().out
    assert "mean leakage fraction" in out and "cross-edge loss" in out


def test_partition_one_silo_no_leakage(workdir, capsys):
    assert main(["partition", "--dataset", "tiny", "--silos", "1", "--out", "p.json"]) == 0
    out = capsys.readouterr().out
    assert "mean leakage fraction   0.0000" in out


def test_explicit_paths_and_missing_files(workdir, capsys):
    assert main(["partition", "--dataset-content", "data/tiny/tiny.content",
                 "--dataset-cites", "data/tiny/tiny.cites", "--out", "p.json"]) == 0
    assert main(["partition", "--dataset-content", "nope.content", "--dataset-cites", "nope.cites"]) == 1
    assert main(["partition", "--dataset", "cora"]) == 1
    assert "not found" in capsys.readouterr().err


def test_dataset_files_untouched(workdir):
    before = (workdir / "data/tiny/tiny.cites").read_bytes()
    main(["train", "--dataset", "tiny", "--epochs", "2", "--hidden", "8", "--out-dir", "r"])
    assert (workdir / "data/tiny/tiny.cites").read_bytes() == before


def test_train_artifacts_and_evaluate(workdir, capsys):
    assert main(["train", "--dataset", "tiny", "--silos", "3", "--scheme", "hifgl", "--arch", "gcn",
                 "--epochs", "3", "--hidden", "8", "--audit", "--out-dir", "run"]) == 0
    run = workdir / "run"
    for name in ("manifest.json", "history.jsonl", "history.csv", "timings.jsonl", "ledger.json",
                 "result.json", "model.ckpt", "partition.json", "audit.tsv"):
        assert (run / name).exists(), name
    manifest = json.loads((run / "manifest.json").read_text())
    rid = manifest["run_id"]
    lines = (run / "history.jsonl").read_text().splitlines()
    assert len(lines) == 3 and all(json.loads(l)["run_id"] == rid for l in lines)
    assert json.loads((run / "ledger.json").read_text())["conformance"]["all_ok"]
    assert json.loads((run / "result.json").read_text())["audit"]["violations"] == 0
    assert manifest["config_sources"]["epochs"] == "flag"
    assert main(["evaluate", "--run", "run"]) == 0
    out = capsys.readouterr().out
    assert "test accuracy (pooled)" in out
    assert main(["report", "--run", "run"]) == 0


def test_workers_give_identical_history(workdir):
    base = ["train", "--dataset", "tiny", "--epochs", "3", "--hidden", "8"]
    assert main(base + ["--workers", "1", "--out-dir", "w1"]) == 0
    assert main(base + ["--workers", "4", "--out-dir", "w4"]) == 0
    assert (workdir / "w1/history.jsonl").read_bytes() == (workdir / "w4/history.jsonl").read_bytes()


def test_config_file_precedence(workdir):
    (workdir / "run.cfg").write_text("# comment\nepochs = 4\nhidden = 8\nlr=0.05\n")
    assert main(["train", "--dataset", "tiny", "--config", "run.cfg", "--epochs", "2", "--out-dir", "c"]) == 0
    m = json.loads((workdir / "c/manifest.json").read_text())
    assert m["config"]["epochs"] == 2 and m["config_sources"]["epochs"] == "flag"
    assert m["config"]["hidden_dim"] == 8 and m["config_sources"]["hidden_dim"] == "file"
    assert m["config"]["lr"] == 0.05
    assert m["config_sources"]["arch"] == "default"


def test_config_file_unknown_key(workdir, capsys):
    (workdir / "bad.cfg").write_text("colour = blue\n")
    assert main(["train", "--dataset", "tiny", "--config", "bad.cfg", "--out-dir", "x"]) == 1
    (workdir / "ok.cfg").write_text("t-privacy=2\n")
    assert read_config_file(workdir / "ok.cfg") == {"t_privacy": "2"}


def test_invalid_config_value_names_field(workdir, capsys):
    assert main(["train", "--dataset", "tiny", "--epochs", "0", "--out-dir", "x"]) == 1
    assert "epochs" in capsys.readouterr().err
    assert main(["train", "--dataset", "tiny", "--t-privacy", "0", "--out-dir", "x"]) == 1


def test_report_gain(capsys):
    assert main(["report", "--model", "0.8555", "--lower", "0.5698", "--upper", "0.8689"]) == 0
    assert "95.52" in capsys.readouterr().out
    assert main(["report", "--model", "0.5698", "--lower", "0.5698", "--upper", "0.8689"]) == 0
    assert main(["report", "--model", "0.5", "--lower", "0.7", "--upper", "0.7"]) == 1
    assert main(["report"]) == 1


def test_selftest_default_and_t4(capsys):
    assert main(["selftest"]) == 0
    assert main(["selftest", "--suite", "coding", "--t", "4"]) == 0
    assert "T in [4]" in capsys.readouterr().out


def test_selftest_injected_fault(capsys):
    assert main(["selftest", "--suite", "invertibility", "--inject-fault", "dup-beta"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" in out and "detected as expected" in out


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "hifgl.cli", "selftest", "--suite", "coding"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "PASS" in proc.stdout
