from pathlib import Path

import pytest

from dustgsg import checks
from dustgsg.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_OK, main
from dustgsg.report import CheckResult

QUICK = str(Path(__file__).resolve().parents[1] / "configs" / "quick.yaml")


def run(cmd, out, *extra):
    return main([cmd, "--config", QUICK, "--out", str(out), *extra])


def snapshot(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run("synth", out) == EXIT_OK
    return out


def test_synth_writes_manifest(synth_dir):
    assert (synth_dir / "manifest.json").is_file()
    assert (synth_dir / "scene_gt.json").is_file()


def test_synth_rerun_is_byte_identical(synth_dir, tmp_path):
    assert run("synth", tmp_path) == EXIT_OK
    assert snapshot(tmp_path) == snapshot(synth_dir)


def test_align_and_rerun(synth_dir, tmp_path):
    assert run("align", tmp_path / "a", "--data", str(synth_dir)) == EXIT_OK
    assert run("align", tmp_path / "b", "--data", str(synth_dir)) == EXIT_OK
    a = snapshot(tmp_path / "a")
    assert {"alignment.csv", "labels_refined.jsonl"} <= set(a)
    assert a == snapshot(tmp_path / "b")


def test_train_both_modes_reproducible(synth_dir, tmp_path):
    for mode in ("dust", "single"):
        assert run("train", tmp_path / f"{mode}1", "--data", str(synth_dir), "--mode", mode) == EXIT_OK
        assert run("train", tmp_path / f"{mode}2", "--data", str(synth_dir), "--mode", mode) == EXIT_OK
        first = snapshot(tmp_path / f"{mode}1")
        assert {"metrics.csv", "summary.csv", "report.txt", "scene_trained.json"} <= set(first)
        assert first == snapshot(tmp_path / f"{mode}2")


def test_verify_theory_passes_and_is_stable(tmp_path):
    assert run("verify-theory", tmp_path / "a") == EXIT_OK
    assert run("verify-theory", tmp_path / "b") == EXIT_OK
    assert snapshot(tmp_path / "a") == snapshot(tmp_path / "b")
    assert "fail" not in (tmp_path / "a" / "theory.csv").read_text()


def test_sweep_runs_and_is_stable(tmp_path):
    assert run("sweep", tmp_path / "a") == EXIT_OK
    assert run("sweep", tmp_path / "b") == EXIT_OK
    a = snapshot(tmp_path / "a")
    assert {"sweep.csv", "checks.csv", "summary.csv", "report.txt"} <= set(a)
    assert a == snapshot(tmp_path / "b")


def test_failed_check_exits_one(tmp_path, monkeypatch):
    bad = [CheckResult("always_fails", 1.0, 0.0, 0.0, False)]
    monkeypatch.setattr(checks, "run_theory_checks", lambda *a, **k: bad)
    assert run("verify-theory", tmp_path) == EXIT_CHECK
    assert "FAIL always_fails" in (tmp_path / "report.txt").read_text()


def test_missing_dataset_exits_two(tmp_path, capsys):
    assert run("train", tmp_path / "o", "--data", str(tmp_path / "nowhere")) == EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_missing_config_exits_two(tmp_path):
    assert main(["synth", "--config", str(tmp_path / "none.yaml"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_invalid_config_exits_two(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("seed: 0\nweights:\n  total_steps: -3\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "total_steps" in capsys.readouterr().err


def test_unknown_key_exits_two(tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("seed: 0\nbogus: 1\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_bad_thread_count_exits_two(tmp_path):
    assert run("synth", tmp_path, "--threads", "0") == EXIT_CONFIG


def test_seed_override_changes_data(synth_dir, tmp_path):
    assert run("synth", tmp_path, "--seed", "7") == EXIT_OK
    assert (tmp_path / "scene_gt.json").read_bytes() != (synth_dir / "scene_gt.json").read_bytes()


def test_usage_error_exits_two():
    with pytest.raises(SystemExit) as e:
        main(["nonsense"])
    assert e.value.code == 2
