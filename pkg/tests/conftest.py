from __future__ import annotations

import json

import numpy as np
import pytest

from guided_attack.validation import central_diff

_ACCEPTANCE: list[tuple[str, bool, str]] = []


def record_acceptance(name: str, passed: bool, detail: str = "") -> None:
    _ACCEPTANCE.append((name, bool(passed), detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    """Per-coordinate relative agreement with an absolute floor for near-zero entries."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    bad = np.abs(a - n) > rtol * np.maximum(np.abs(a), np.abs(n)) + atol
    assert not bad.any(), f"{bad.sum()} coordinates differ; worst {np.max(np.abs(a - n)):.3e}"


@pytest.fixture
def fd():
    return central_diff


TINY_CONFIG = {
    "version": 1,
    "seeds": [0, 1],
    "victim": {"timesteps": 0, "hidden": [16]},
    "adversary": {"timesteps": 256, "config": {"hidden": [16]},
                  "ppo": {"rollout_size": 128, "minibatch_size": 64, "epochs": 2}},
    "perturb": {"epsilon": 0.1, "iterations": 10},
    "demos": {"episodes": 200, "ratio": 4.0},
    "expert": {"members": 2, "spec": {"expert_hidden": [8], "router_hidden": [4]},
               "train": {"epochs": 3, "batch_size": 8}},
    "evaluate": {"episodes": 6},
    "sweep": {"epsilons": [0.05, 0.1], "budgets": [4, 7], "methods": ["vanilla", "ours"]},
}

TINY_STAGES = (
    ["train-victim"],
    ["train-adversary", "--mode", "vanilla"],
    ["collect-demos"],
    ["train-expert"],
    ["train-adversary", "--mode", "ours"],
    ["train-adversary", "--mode", "vprl"],
    ["train-adversary", "--mode", "pcrl"],
    ["evaluate"],
)


def run_tiny_pipeline(root, stages=TINY_STAGES):
    """Run the CLI stages on a seconds-scale config; returns the run directory."""
    from guided_attack.cli import main

    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "config.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    out = root / "run"
    for stage in stages:
        code = main(stage + ["--config", str(cfg), "--out", str(out)])
        assert code == 0, f"stage {stage} exited {code}"
    return out
