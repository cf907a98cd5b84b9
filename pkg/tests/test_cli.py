from __future__ import annotations

import csv
import io
import json
import subprocess
import sys

import pytest

from guided_attack.cli import RESULT_COLUMNS, SWEEP_COLUMNS, main
from guided_attack.ppo import GaussianPolicy

from conftest import TINY_CONFIG, run_tiny_pipeline


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    return run_tiny_pipeline(root), root / "config.json"


def _rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def test_pipeline_emits_all_artifacts(run):
    out, _ = run
    for seed in TINY_CONFIG["seeds"]:
        assert (out / "victim" / f"seed{seed}.ckpt").exists()
        for mode in ("vanilla", "kl_guided", "value_penalty", "policy_constrained"):
            for suffix in (".ckpt", "_critic.ckpt", "_train.csv", "_episodes.jsonl"):
                assert (out / "adversary" / mode / f"seed{seed}{suffix}").exists()
    assert (out / "demos" / "demos.jsonl").exists()
    assert (out / "expert" / "manifest.json").exists()
    assert (out / "results" / "evaluation.csv").exists()
    for stage_cfg in ("victim/train_victim_config.json", "demos/collect_demos_config.json",
                      "expert/train_expert_config.json", "results/evaluate_config.json"):
        resolved = json.loads((out / stage_cfg).read_text())
        assert resolved["version"] == 1 and "paths" in resolved


def test_results_schema_and_no_attack_rows(run):
    out, _ = run
    text = (out / "results" / "evaluation.csv").read_text()
    assert text.splitlines()[0] == ",".join(RESULT_COLUMNS)
    rows = _rows(out / "results" / "evaluation.csv")
    assert {r["method"] for r in rows} == {"no-attack", "vanilla", "ours", "vprl", "pcrl"}
    assert len(rows) == 5 * len(TINY_CONFIG["seeds"])
    for r in rows:
        assert float(r["ANA"]) <= 4
        if r["method"] == "no-attack":
            assert float(r["ANA"]) == 0.0


def test_zero_timestep_victim_is_its_initialisation(run):
    out, _ = run
    for seed in TINY_CONFIG["seeds"]:
        init = GaussianPolicy.create(26, tuple(TINY_CONFIG["victim"]["hidden"]), 1, seed)
        assert GaussianPolicy.load(out / "victim" / f"seed{seed}.ckpt").params.tobytes() == init.params.tobytes()


def test_evaluate_twice_gives_identical_csv(run):
    out, cfg = run
    path = out / "results" / "evaluation.csv"
    before = path.read_bytes()
    assert main(["evaluate", "--config", str(cfg), "--out", str(out)]) == 0
    assert path.read_bytes() == before


def test_single_mode_evaluation(run, tmp_path):
    out, cfg = run
    assert main(["evaluate", "--mode", "no-attack", "--seed", "0", "--config", str(cfg), "--out", str(out)]) == 0
    rows = _rows(out / "results" / "evaluation.csv")
    assert [(r["method"], r["seed"]) for r in rows] == [("no-attack", "0")]
    main(["evaluate", "--config", str(cfg), "--out", str(out)])  # restore the full table


def test_sweep_cardinality_and_schema(run):
    out, cfg = run
    assert main(["sweep", "--train", "--timesteps", "128", "--config", str(cfg), "--out", str(out)]) == 0
    path = out / "sweep" / "sweep.csv"
    assert path.read_text().splitlines()[0] == ",".join(SWEEP_COLUMNS)
    rows = _rows(path)
    assert sum(r["row"] == "seed" for r in rows) == 16
    assert sum(r["row"] == "mean" for r in rows) == 8
    for r in rows:
        if r["row"] == "mean":
            assert r["seed"] == "" and r["CR_std"] != ""
        else:
            assert r["CR_std"] == ""
    # cells are reused without --train
    assert main(["sweep", "--config", str(cfg), "--out", str(out)]) == 0
    assert _rows(path) == rows


def _error(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


def test_missing_upstream_names_the_stage(tmp_path, capsys):
    assert main(["evaluate", "--out", str(tmp_path / "empty")]) == 2
    err = _error(capsys)
    assert err["error"] == "dependency" and "train-victim" in err["message"]
    assert main(["train-expert", "--out", str(tmp_path / "empty")]) == 2
    assert "collect-demos" in _error(capsys)["message"]


def test_missing_source_adversary_names_its_stage(run, tmp_path, capsys):
    out, cfg = run
    assert main(["collect-demos", "--seed", "5", "--config", str(cfg), "--out", str(out)]) == 2
    err = _error(capsys)
    assert err["error"] == "dependency" and "train-victim" in err["message"]


def test_bad_config_is_reported(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"version": 99}))
    assert main(["train-victim", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert _error(capsys)["error"] == "config"
    cfg.write_text("{nope")
    assert main(["train-victim", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert _error(capsys)["error"] == "config"


def test_unwritable_output_is_an_io_error(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    assert main(["train-victim", "--config", str(cfg), "--out", str(blocker / "run")]) == 2
    assert _error(capsys)["error"] == "io"


def test_validate_subcommand(capsys):
    assert main(["validate"]) == 0
    assert "gradient checks" in capsys.readouterr().out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "guided_attack", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("train-victim", "collect-demos", "train-expert", "train-adversary", "evaluate", "sweep",
                "validate"):
        assert cmd in res.stdout
