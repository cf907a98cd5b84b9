"""One test per acceptance criterion, each at its stated tolerance.

Criteria 4, 7 and 8 need a full default-scale pipeline run (about half an
hour). Set GUIDED_ATTACK_RUN_DIR to reuse a finished run directory produced by
the same code; otherwise a fresh run is made in a temporary directory.
"""

from __future__ import annotations

import csv
import io
import json
import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from guided_attack.adversary import evaluate_adversary
from guided_attack.cli import EVAL_MODES, main
from guided_attack.env import ScenarioConfig
from guided_attack.expert import ensemble_aggregate
from guided_attack.metrics import check_reference_table, proposition_check, ToyBandit
from guided_attack.perturb import PerturbConfig, apply_perturbation, generate_bim, target_loss
from guided_attack.ppo import GaussianPolicy
from guided_attack.validation import gradient_report

from conftest import TINY_STAGES, record_acceptance, run_tiny_pipeline

BUDGET = 4
FULL_STAGES = (
    ["train-victim"],
    ["train-adversary", "--mode", "vanilla"],
    ["collect-demos"],
    ["train-expert"],
    ["train-adversary", "--mode", "ours"],
    ["evaluate", "--mode", "no-attack", "--mode", "vanilla", "--mode", "ours"],
)


def _csv(path):
    return list(csv.DictReader(io.StringIO(Path(path).read_text())))


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    reuse = os.environ.get("GUIDED_ATTACK_RUN_DIR")
    if reuse:
        out = Path(reuse)
        if not (out / "results" / "evaluation.csv").exists():
            pytest.fail(f"{out} is not a finished run directory")
        return out
    out = tmp_path_factory.mktemp("full") / "run"
    for stage in FULL_STAGES:
        assert main(stage + ["--out", str(out)]) == 0, f"stage {stage} failed"
    return out


@pytest.fixture(scope="module")
def seeds(full_run):
    return json.loads((full_run / "victim" / "train_victim_config.json").read_text())["seeds"]


# 1 -------------------------------------------------------------------------

def test_criterion_1_ae_formula_reproduces_reference_table():
    t0 = time.perf_counter()
    rows = check_reference_table(tol=0.002)
    elapsed = time.perf_counter() - t0
    worst = max(abs(ae - row[5]) for row, ae, _ in rows)
    passed = len(rows) == 24 and all(ok for _, _, ok in rows) and elapsed < 1.0
    record_acceptance("1 AE formula fidelity", passed, f"24 rows, worst |dAE| {worst:.4f}, {elapsed:.3f}s")
    assert passed


# 2 -------------------------------------------------------------------------

def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    rep = gradient_report(n_cases=15, seed=2024)
    elapsed = time.perf_counter() - t0
    errors = [e for v in rep.values() for e in v]
    worst = max(errors)
    passed = len(errors) >= 100 and worst <= 1e-4 and elapsed < 60
    record_acceptance("2 gradient suite", passed,
                      f"{len(errors)} cases over {len(rep)} families, worst rel err {worst:.2e}, {elapsed:.1f}s")
    assert passed


# 3 -------------------------------------------------------------------------

def test_criterion_3_ensemble_moments_match_monte_carlo():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    n = 1_000_000
    failures, worst_z = 0, 0.0
    for _ in range(20):
        M = int(rng.integers(1, 7))
        means = rng.normal(0, 1.5, (M, 2))
        variances = rng.uniform(0.05, 2.0, (M, 2))
        agg = ensemble_aggregate(means, variances)
        comp = rng.integers(M, size=n)
        x = means[comp] + np.sqrt(variances[comp]) * rng.standard_normal((n, 2))
        mu, var = x.mean(axis=0), x.var(axis=0, ddof=1)
        z_mu = np.abs(agg.mean - mu) / np.sqrt(var / n)
        z_var = np.abs(agg.var - var) / np.sqrt((np.mean((x - mu) ** 4, axis=0) - var ** 2) / n)
        worst_z = max(worst_z, float(z_mu.max()), float(z_var.max()))
        failures += int(np.any(z_mu > 3) or np.any(z_var > 3))
    elapsed = time.perf_counter() - t0
    passed = failures == 0 and elapsed < 60
    record_acceptance("3 ensemble-moment oracle", passed,
                      f"20 ensembles x 1e6 draws, worst |z| {worst_z:.2f}, {elapsed:.1f}s")
    assert passed


# 4 -------------------------------------------------------------------------

def _episode_logs(run: Path):
    for path in sorted(run.glob("adversary/*/seed*_episodes.jsonl")):
        yield path, "train"
    for path in sorted(run.glob("results/*_episodes.jsonl")):
        yield path, "eval"


def test_criterion_4_budget_soundness(full_run):
    n_episodes, violations = 0, []
    for path, _ in _episode_logs(full_run):
        for line in path.read_text().splitlines():
            ep = json.loads(line)
            n_episodes += 1
            if ep["n_attacks"] > BUDGET or len(ep["attack_steps"]) != ep["n_attacks"]:
                violations.append((path.name, ep["episode_seed"], "budget"))
            for t in ep["reward_steps"]:
                if t != ep["collision_step"] or not any(a <= t for a in ep["attack_steps"]):
                    violations.append((path.name, ep["episode_seed"], "reward"))
            if ep["adv_return"] not in (0.0, 1.0) or (ep["adv_return"] == 1.0) != bool(ep["reward_steps"]):
                violations.append((path.name, ep["episode_seed"], "return"))
    passed = n_episodes > 0 and not violations
    record_acceptance("4 budget soundness", passed, f"{n_episodes} logged episodes, {len(violations)} violations")
    assert passed, violations[:10]


# 5 -------------------------------------------------------------------------

def test_criterion_5_perturbation_soundness():
    rng = np.random.default_rng(11)
    n, bad_budget, bad_loss = 1000, 0, 0
    victims = []
    for i in range(50):
        hidden = tuple(int(h) for h in rng.integers(4, 33, size=int(rng.integers(1, 3))))
        pol = GaussianPolicy.create(26, hidden, 1, 1000 + i)
        pol.params = pol.params + rng.normal(0, 0.5, pol.params.size)
        victims.append(pol)
    for i in range(n):
        victim = victims[i % len(victims)]
        eps = float(rng.choice([0.01, 0.05, 0.1, 0.2]))
        cfg = PerturbConfig(epsilon=eps, iterations=int(rng.choice([10, 50])))
        s = rng.uniform(-1, 1, 26)
        target = float(rng.uniform(-1, 1))
        delta = generate_bim(victim, s, target, cfg)
        bad_budget += int(np.max(np.abs(delta)) > eps + 1e-12)
        bad_loss += int(target_loss(victim, apply_perturbation(s, True, delta), target)
                        > target_loss(victim, s, target))
    passed = bad_budget == 0 and bad_loss == 0
    record_acceptance("5 perturbation soundness", passed,
                      f"{n} triples, {bad_budget} budget and {bad_loss} loss violations")
    assert passed


# 6 -------------------------------------------------------------------------

def test_criterion_6_fixed_weight_bias_and_annealed_recovery():
    t0 = time.perf_counter()
    rep = proposition_check(ToyBandit(optimum=0.0, expert_mean=1.0, expert_std=1.0), beta_fixed=1.0)
    elapsed = time.perf_counter() - t0
    fixed_ok = (rep["J_reg_fixed"] < rep["J_opt"]
                and abs(rep["mean_fixed"] - rep["analytic_mean"]) <= 1e-3
                and abs(rep["J_reg_fixed"] - rep["analytic_J"]) <= 1e-3)
    anneal_ok = abs(rep["mean_annealed"] - 0.0) <= 0.05
    passed = fixed_ok and anneal_ok and elapsed < 60
    record_acceptance("6 toy bandit check", passed,
                      f"fixed mean {rep['mean_fixed']:.4f} (analytic {rep['analytic_mean']:.4f}), "
                      f"J {rep['J_reg_fixed']:.4f} < {rep['J_opt']}; annealed mean {rep['mean_annealed']:.4f}")
    assert passed


# 7 -------------------------------------------------------------------------

def test_criterion_7_vanilla_attack_raises_collision_rate(full_run):
    rows = _csv(full_run / "results" / "evaluation.csv")
    cr = {m: float(np.mean([float(r["CR"]) for r in rows if r["method"] == m])) for m in ("no-attack", "vanilla")}
    passed = cr["no-attack"] <= 0.05 and cr["vanilla"] >= cr["no-attack"] + 0.25
    record_acceptance("7 directional attack efficacy", passed,
                      f"no-attack CR {cr['no-attack']:.3f}, vanilla CR {cr['vanilla']:.3f} "
                      f"(need >= {cr['no-attack'] + 0.25:.3f})")
    assert passed


# 8 -------------------------------------------------------------------------

SMOOTH = 3


def iterations_to_reach(collision_rates, frac=0.9, window=SMOOTH):
    """First iteration (1-based) whose trailing-mean collision rate reaches frac x its final value."""
    cr = np.asarray(collision_rates, dtype=float)
    smooth = np.array([cr[max(0, i - window + 1):i + 1].mean() for i in range(len(cr))])
    final = smooth[-1]
    return int(np.argmax(smooth >= frac * final)) + 1


def test_iterations_to_reach_helper():
    assert iterations_to_reach([0.0, 0.3, 0.3, 0.3], window=1) == 2
    assert iterations_to_reach([0.0, 0.0, 0.9, 0.9, 0.9], window=3) == 5
    assert iterations_to_reach([0.0, 0.0], window=3) == 1


def test_criterion_8_guided_converges_no_slower_and_beta_monotone(full_run, seeds):
    iters, beta_violations = {}, 0
    for mode in ("vanilla", "kl_guided"):
        its = []
        for seed in seeds:
            log = _csv(full_run / "adversary" / mode / f"seed{seed}_train.csv")
            its.append(iterations_to_reach([float(r["collision_rate"]) for r in log]))
            if mode == "kl_guided":
                for prev, cur in zip(log, log[1:]):
                    if float(cur["mean_return"]) >= float(prev["mean_return"]) and \
                            float(cur["beta"]) > float(prev["beta"]):
                        beta_violations += 1
        iters[mode] = its
    mean_v, mean_g = float(np.mean(iters["vanilla"])), float(np.mean(iters["kl_guided"]))
    passed = mean_g <= mean_v and beta_violations == 0
    record_acceptance("8 expert-guidance benefit", passed,
                      f"iterations to 90% of final CR: guided {iters['kl_guided']} (mean {mean_g:.2f}) "
                      f"vs vanilla {iters['vanilla']} (mean {mean_v:.2f}); beta violations {beta_violations}")
    assert passed


def test_larger_attack_budget_does_not_lower_attack_count(full_run, seeds):
    """Same guided adversary and expert, evaluated at budgets 4 and 7."""
    env = ScenarioConfig()
    ana = {}
    for budget in (4, 7):
        vals = []
        for seed in seeds:
            victim = GaussianPolicy.load(full_run / "victim" / f"seed{seed}.ckpt")
            adv = GaussianPolicy.load(full_run / "adversary" / "kl_guided" / f"seed{seed}.ckpt")
            vals.append(evaluate_adversary(adv, victim, env, 100, 10_000 + seed, budget).ANA)
        ana[budget] = float(np.mean(vals))
    assert ana[7] >= ana[4]


# 9 -------------------------------------------------------------------------

def _tree(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "timing.log"}


def test_criterion_9_pipeline_determinism(tmp_path):
    stages = TINY_STAGES[:-1] + (["evaluate"], ["sweep", "--train", "--timesteps", "128"])
    first = run_tiny_pipeline(tmp_path, stages)
    moved = tmp_path / "first"
    shutil.move(first, moved)
    second = run_tiny_pipeline(tmp_path, stages)
    a, b = _tree(moved), _tree(second)
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    kinds = {Path(k).suffix for k in a}
    passed = not differing and {".ckpt", ".jsonl", ".csv"} <= kinds and any("demos" in k for k in a)
    record_acceptance("9 pipeline determinism", passed,
                      f"{len(a)} files compared (timing.log excluded), {len(differing)} differ")
    assert passed, differing[:10]
