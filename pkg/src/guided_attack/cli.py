"""Command-line pipeline: victim -> source adversaries -> demonstrations ->
expert ensemble -> guided adversaries -> evaluation and sweeps.

Every stage reads its inputs from, and writes its outputs under, the run
directory given by ``--out``. The fully resolved configuration is written
next to each stage's outputs.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import demos as demos_mod
from .adversary import AdvConfig, run_episodes, run_training
from .env import ScenarioConfig
from .errors import ConfigError, DependencyError, GuidedAttackError
from .expert import BcConfig, EnsembleExpert, MoeSpec, train_ensemble
from .metrics import METRIC_COLUMNS, Metrics, aggregate, metrics_csv
from .perturb import PerturbConfig
from .ppo import GaussianPolicy, PpoConfig
from .victim import DEFAULT_HIDDEN, train_victim

log = logging.getLogger("guided_attack")

CONFIG_VERSION = 1

# evaluation/CLI method names -> adversary training modes
METHODS = {"vanilla": "vanilla", "ours": "kl_guided", "vprl": "value_penalty", "pcrl": "policy_constrained"}
EVAL_MODES = ("no-attack",) + tuple(METHODS)
RESULT_COLUMNS = ("method", "scenario", "seed", "epsilon", "budget") + METRIC_COLUMNS
SWEEP_COLUMNS = ("row", "method", "epsilon", "budget", "seed", "SR", "CR", "AS", "AR", "ANA", "AE",
                 "n_episodes", "CR_std", "ANA_std", "AE_std")
TRAIN_LOG_COLUMNS = ("iteration", "timesteps", "mode", "mean_return", "collision_rate", "mean_attacks",
                     "beta", "multiplier", "episodes_this_iter", "actor_loss", "critic_loss", "entropy",
                     "clip_fraction", "mean_kl_to_expert")
VICTIM_LOG_COLUMNS = ("iteration", "mean_return", "collision_rate", "actor_loss", "critic_loss",
                      "entropy", "clip_fraction")


def default_config() -> dict:
    return {
        "version": CONFIG_VERSION,
        "scenario": "left_turn",
        "seeds": [0, 1, 2],
        "env": ScenarioConfig().to_dict(),
        "victim": {"timesteps": 14000, "hidden": list(DEFAULT_HIDDEN),
                   "ppo": PpoConfig(rollout_size=512, epochs=20).to_dict()},
        "perturb": PerturbConfig().to_dict(),
        "adversary": {"timesteps": 50000, "config": AdvConfig().to_dict(), "ppo": PpoConfig().to_dict()},
        "demos": {"episodes": 300, "ratio": 1.0, "merge": []},
        "expert": {"members": 5, "spec": MoeSpec().to_dict(), "train": BcConfig().to_dict()},
        "evaluate": {"episodes": 200, "seed_offset": 10_000},
        "sweep": {"epsilons": [0.05, 0.1], "budgets": [4, 7], "methods": ["vanilla", "ours"]},
    }


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    raw: dict
    out: Path
    paths: dict = field(default_factory=dict)

    @property
    def scenario(self) -> str:
        return self.raw["scenario"]

    @property
    def seeds(self) -> list:
        return list(self.raw["seeds"])

    @property
    def env(self) -> ScenarioConfig:
        return ScenarioConfig.from_dict({**self.raw["env"], "scenario": self.scenario})

    @property
    def perturb(self) -> PerturbConfig:
        return PerturbConfig(**self.raw["perturb"])

    def adv_config(self, mode: str | None = None) -> AdvConfig:
        d = dict(self.raw["adversary"]["config"])
        if mode is not None:
            d["mode"] = mode
        return AdvConfig.from_dict(d)

    def victim_path(self, seed: int) -> Path:
        return self.out / "victim" / f"seed{seed}.ckpt"

    def adversary_dir(self, mode: str) -> Path:
        return self.out / "adversary" / mode

    def adversary_path(self, mode: str, seed: int) -> Path:
        return self.adversary_dir(mode) / f"seed{seed}.ckpt"

    @property
    def demos_path(self) -> Path:
        return self.out / "demos" / "demos.jsonl"

    @property
    def expert_dir(self) -> Path:
        return self.out / "expert"

    @property
    def results_dir(self) -> Path:
        return self.out / "results"

    def resolved(self) -> dict:
        d = copy.deepcopy(self.raw)
        d["paths"] = {"victim": str(self.out / "victim"), "demos": str(self.demos_path),
                      "expert": str(self.expert_dir), "adversary": str(self.out / "adversary"),
                      "results": str(self.results_dir)}
        return d


def build_config(args) -> RunConfig:
    raw = default_config()
    if args.config:
        try:
            raw = _merge(raw, json.loads(Path(args.config).read_text()))
        except FileNotFoundError as e:
            raise ConfigError(f"config file {args.config} not found") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {args.config} is not valid JSON: {e}") from e
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {raw.get('version')!r}")
    if args.scenario:
        raw["scenario"] = args.scenario
    if args.seed is not None:
        raw["seeds"] = [args.seed]
    if args.seeds:
        raw["seeds"] = [int(s) for s in args.seeds.split(",")]
    if not raw["seeds"]:
        raise ConfigError("seeds must be non-empty")
    if getattr(args, "epsilon", None) is not None:
        raw["perturb"]["epsilon"] = args.epsilon
    if getattr(args, "budget", None) is not None:
        raw["adversary"]["config"]["attack_budget"] = args.budget
    if getattr(args, "timesteps", None) is not None:
        key = "victim" if args.command == "train-victim" else "adversary"
        raw[key]["timesteps"] = args.timesteps
    if getattr(args, "episodes", None) is not None:
        key = "demos" if args.command == "collect-demos" else "evaluate"
        raw[key]["episodes"] = args.episodes
    cfg = RunConfig(raw, Path(args.out))
    cfg.env  # validate early
    cfg.perturb
    cfg.adv_config()
    return cfg


def _write_config(cfg: RunConfig, stage: str, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{stage}_config.json").write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")


def _sidecar(directory: Path, stage: str, started: float) -> None:
    """Wall-clock facts go here so the real outputs stay byte-reproducible."""
    with open(directory / "timing.log", "a", encoding="utf-8") as f:
        f.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {stage} {time.time() - started:.1f}s\n")


def _require(path: Path, stage: str, what: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing {what} at {path}; run `{stage}` first")
    return path


def _load_victim(cfg: RunConfig, seed: int) -> GaussianPolicy:
    return GaussianPolicy.load(_require(cfg.victim_path(seed), "train-victim", "victim checkpoint"))


def _load_expert(cfg: RunConfig) -> EnsembleExpert:
    _require(cfg.expert_dir / "manifest.json", "train-expert", "expert ensemble")
    return EnsembleExpert.load(cfg.expert_dir)


def _load_adversary(cfg: RunConfig, mode: str, seed: int) -> GaussianPolicy:
    path = cfg.adversary_path(mode, seed)
    return GaussianPolicy.load(_require(path, f"train-adversary --mode {_method_name(mode)}", "adversary"))


def _method_name(mode: str) -> str:
    return {v: k for k, v in METHODS.items()}[mode]


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def _eval_seed(cfg: RunConfig, seed: int) -> int:
    return cfg.raw["evaluate"]["seed_offset"] + seed


def cmd_train_victim(cfg: RunConfig) -> None:
    out = cfg.out / "victim"
    _write_config(cfg, "train_victim", out)
    started = time.time()
    vc = cfg.raw["victim"]
    rows = []
    for seed in cfg.seeds:
        policy, critic, history = train_victim(cfg.env, PpoConfig.from_dict(vc["ppo"]), vc["timesteps"], seed,
                                               tuple(vc["hidden"]))
        policy.save(cfg.victim_path(seed), seed=seed)
        critic.save(out / f"seed{seed}_critic.ckpt", seed=seed)
        (out / f"seed{seed}_train.csv").write_text(metrics_csv(history, VICTIM_LOG_COLUMNS))
        m = _evaluate(cfg, policy, None, seed, cfg.adv_config().attack_budget, cfg.perturb)
        rows.append({"method": "no-attack", "scenario": cfg.scenario, "seed": seed,
                     "epsilon": 0.0, "budget": 0, **m.row()})
        log.info("victim seed %d: no-attack CR %.3f SR %.3f", seed, m.CR, m.SR)
    cfg.results_dir.mkdir(parents=True, exist_ok=True)
    (cfg.results_dir / "victim_metrics.csv").write_text(metrics_csv(rows, RESULT_COLUMNS))
    _sidecar(out, "train-victim", started)


def _train_one(cfg: RunConfig, mode: str, seed: int, adv_cfg: AdvConfig, perturb: PerturbConfig,
               directory: Path, expert=None):
    victim = _load_victim(cfg, seed)
    ppo_cfg = PpoConfig.from_dict(cfg.raw["adversary"]["ppo"])
    iterations = max(1, cfg.raw["adversary"]["timesteps"] // ppo_cfg.rollout_size)
    res = run_training(cfg.env, victim, expert, adv_cfg, ppo_cfg, perturb, iterations, seed,
                       progress=lambda r: log.info("%s seed %d it %d: CR %.3f beta %.3f", mode, seed,
                                                   r["iteration"], r["collision_rate"], r["beta"]))
    directory.mkdir(parents=True, exist_ok=True)
    res.policy.save(directory / f"seed{seed}.ckpt", seed=seed, extra={"adv_config": adv_cfg.to_dict()})
    res.critic.save(directory / f"seed{seed}_critic.ckpt", seed=seed)
    (directory / f"seed{seed}_train.csv").write_text(metrics_csv(res.log, TRAIN_LOG_COLUMNS))
    _write_jsonl(directory / f"seed{seed}_episodes.jsonl", res.episodes)
    (directory / "adv_config.json").write_text(json.dumps(adv_cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return res


def cmd_train_adversary(cfg: RunConfig, method: str) -> None:
    mode = METHODS[method]
    adv_cfg = cfg.adv_config(mode)
    expert = _load_expert(cfg) if mode != "vanilla" else None
    directory = cfg.adversary_dir(mode)
    _write_config(cfg, f"train_adversary_{method}", directory)
    started = time.time()
    for seed in cfg.seeds:
        _train_one(cfg, mode, seed, adv_cfg, cfg.perturb, directory, expert)
    _sidecar(directory, f"train-adversary {method}", started)


def cmd_collect_demos(cfg: RunConfig) -> None:
    out = cfg.demos_path.parent
    _write_config(cfg, "collect_demos", out)
    started = time.time()
    dc = cfg.raw["demos"]
    parts = []
    for seed in cfg.seeds:
        victim = _load_victim(cfg, seed)
        adversary = _load_adversary(cfg, "vanilla", seed)
        raw = demos_mod.collect(adversary, victim, cfg.env, dc["episodes"], seed,
                                cfg.adv_config().attack_budget, cfg.perturb)
        kept = demos_mod.filter_successful(raw)
        parts.append(demos_mod.to_dataset(kept, source=f"{cfg.scenario}/vanilla/seed{seed}", seed=seed))
        log.info("demos seed %d: %d/%d successful episodes", seed, len(kept), len(raw))
    for other in dc.get("merge", []):
        parts.append(demos_mod.load(_require(Path(other), "collect-demos", "demonstration file")))
    ds = demos_mod.merge_scenarios(*parts)
    if ds.counts["attack"] == 0:
        raise DependencyError("no successful attacks to learn from; train the vanilla adversary longer "
                              "(`train-adversary --mode vanilla --timesteps ...`) or collect more episodes")
    ds = demos_mod.undersample_non_attack(ds, dc["ratio"], cfg.seeds[0])
    demos_mod.save(cfg.demos_path, ds)
    log.info("demos: %s", ds.counts)
    _sidecar(out, "collect-demos", started)


def cmd_train_expert(cfg: RunConfig) -> None:
    ds = demos_mod.load(_require(cfg.demos_path, "collect-demos", "demonstration dataset"))
    ec = cfg.raw["expert"]
    _write_config(cfg, "train_expert", cfg.expert_dir)
    started = time.time()
    seeds = [cfg.seeds[0] * 100 + m for m in range(ec["members"])]
    ens = train_ensemble(ds.states, ds.actions, MoeSpec.from_dict(ec["spec"]), seeds, BcConfig(**ec["train"]),
                         log=lambda r: log.info("expert member %s", r))
    ens.save(cfg.expert_dir)
    _sidecar(cfg.expert_dir, "train-expert", started)


def _evaluate(cfg: RunConfig, victim, adversary, seed: int, budget: int, perturb: PerturbConfig,
              log_path: Path | None = None) -> Metrics:
    eval_seed = _eval_seed(cfg, seed)
    episodes = run_episodes(adversary, victim, cfg.env, budget, perturb, cfg.raw["evaluate"]["episodes"],
                            eval_seed)
    if log_path is not None:
        _write_jsonl(log_path, [e.to_dict() for e in episodes])
    return aggregate([e.record() for e in episodes], seeds=[eval_seed])


def _evaluate_rows(cfg: RunConfig, method: str, perturb: PerturbConfig, budget: int, adv_loader,
                   log_dir: Path) -> list[dict]:
    rows = []
    for seed in cfg.seeds:
        victim = _load_victim(cfg, seed)
        adversary = None if method == "no-attack" else adv_loader(seed)
        m = _evaluate(cfg, victim, adversary, seed, budget, perturb, log_dir / f"{method}_seed{seed}_episodes.jsonl")
        rows.append({"method": method, "scenario": cfg.scenario, "seed": seed,
                     "epsilon": 0.0 if method == "no-attack" else perturb.epsilon,
                     "budget": 0 if method == "no-attack" else budget, **m.row()})
    return rows


def cmd_evaluate(cfg: RunConfig, methods) -> Path:
    cfg.results_dir.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, "evaluate", cfg.results_dir)
    started = time.time()
    budget = cfg.adv_config().attack_budget
    rows = []
    for method in methods:
        if method not in EVAL_MODES:
            raise ConfigError(f"unknown evaluation mode {method!r}; expected one of {EVAL_MODES}")
        mode = METHODS.get(method)
        rows += _evaluate_rows(cfg, method, cfg.perturb, budget,
                               lambda seed, mode=mode: _load_adversary(cfg, mode, seed), cfg.results_dir)
    path = cfg.results_dir / "evaluation.csv"
    path.write_text(metrics_csv(rows, RESULT_COLUMNS))
    _sidecar(cfg.results_dir, "evaluate", started)
    return path


def cmd_sweep(cfg: RunConfig, train: bool) -> Path:
    """Train (or reuse) one adversary per (method, epsilon, budget, seed) cell and evaluate it."""
    sc = cfg.raw["sweep"]
    out = cfg.out / "sweep"
    _write_config(cfg, "sweep", out)
    started = time.time()
    needs_expert = any(METHODS[m] != "vanilla" for m in sc["methods"])
    expert = _load_expert(cfg) if needs_expert else None
    rows, agg = [], []
    for method in sc["methods"]:
        mode = METHODS[method]
        for eps in sc["epsilons"]:
            for budget in sc["budgets"]:
                perturb = PerturbConfig(eps, cfg.perturb.iterations)
                adv_cfg = AdvConfig.from_dict({**cfg.adv_config(mode).to_dict(), "attack_budget": budget})
                cell = out / f"{method}_eps{eps}_budget{budget}"

                def loader(seed, cell=cell, mode=mode, adv_cfg=adv_cfg, perturb=perturb):
                    path = cell / f"seed{seed}.ckpt"
                    if not path.exists():
                        if not train:
                            raise DependencyError(f"missing sweep adversary {path}; rerun `sweep --train`")
                        _train_one(cfg, mode, seed, adv_cfg, perturb, cell, expert)
                    return GaussianPolicy.load(path)

                cell_rows = _evaluate_rows(cfg, method, perturb, budget, loader, cell)
                for r in cell_rows:
                    rows.append({"row": "seed", **r})
                agg.append(_aggregate_row(method, eps, budget, cell_rows))
    path = out / "sweep.csv"
    path.write_text(metrics_csv(rows + agg, SWEEP_COLUMNS))
    _sidecar(out, "sweep", started)
    return path


def _aggregate_row(method: str, eps: float, budget: int, rows: list[dict]) -> dict:
    out = {"row": "mean", "method": method, "epsilon": eps, "budget": budget, "seed": "",
           "n_episodes": sum(r["n_episodes"] for r in rows)}
    for k in ("SR", "CR", "AS", "AR", "ANA", "AE"):
        out[k] = float(np.mean([r[k] for r in rows]))
    for k in ("CR", "ANA", "AE"):
        out[f"{k}_std"] = float(np.std([r[k] for r in rows]))
    return out


def cmd_validate() -> bool:
    """Quick numerical self-checks that need no trained artifacts."""
    from .metrics import check_reference_table, proposition_check
    from .validation import gradient_checks

    ok = True
    table = check_reference_table()
    bad = [row for row, _, good in table if not good]
    print(f"reference AE table: {len(table) - len(bad)}/{len(table)} rows within 0.002")
    ok &= not bad
    rep = proposition_check()
    fixed_ok = abs(rep["mean_fixed"] - rep["analytic_mean"]) <= 1e-3 and rep["J_reg_fixed"] < rep["J_opt"]
    anneal_ok = abs(rep["mean_annealed"]) <= 0.05
    print(f"fixed-weight bias: mean {rep['mean_fixed']:.4f} (analytic {rep['analytic_mean']:.4f}) "
          f"{'ok' if fixed_ok else 'FAIL'}")
    print(f"annealed weight: mean {rep['mean_annealed']:.4f} {'ok' if anneal_ok else 'FAIL'}")
    ok &= fixed_ok and anneal_ok
    worst = gradient_checks(n_cases=20, seed=0)
    print(f"gradient checks: worst relative error {worst:.2e} {'ok' if worst <= 1e-4 else 'FAIL'}")
    ok &= worst <= 1e-4
    return bool(ok)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="guided-attack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config; unspecified fields take defaults")
        sp.add_argument("--out", default="runs/default", help="run directory")
        sp.add_argument("--seed", type=int, help="run a single seed")
        sp.add_argument("--seeds", help="comma-separated seeds")
        sp.add_argument("--scenario", choices=("left_turn", "merge"))
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("train-victim", help="train the PPO driving policy")
    common(sp)
    sp.add_argument("--timesteps", type=int)
    sp.add_argument("--episodes", type=int, help="no-attack evaluation episodes")

    sp = sub.add_parser("train-adversary", help="train attack policies")
    common(sp)
    sp.add_argument("--mode", choices=tuple(METHODS), default="vanilla")
    sp.add_argument("--timesteps", type=int)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--budget", type=int)

    sp = sub.add_parser("collect-demos", help="roll out vanilla adversaries and keep successful attacks")
    common(sp)
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--budget", type=int)

    sp = sub.add_parser("train-expert", help="behavior-clone the expert ensemble")
    common(sp)

    sp = sub.add_parser("evaluate", help="evaluate methods and write the results CSV")
    common(sp)
    sp.add_argument("--mode", action="append", choices=EVAL_MODES,
                    help="repeatable; defaults to every mode")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--budget", type=int)

    sp = sub.add_parser("sweep", help="grid over perturbation and attack budgets")
    common(sp)
    sp.add_argument("--train", action="store_true", help="train missing cell adversaries")
    sp.add_argument("--timesteps", type=int, help="adversary timesteps per cell")
    sp.add_argument("--episodes", type=int)

    sp = sub.add_parser("validate", help="run the numerical self-checks")
    sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "validate":
            return 0 if cmd_validate() else 1
        cfg = build_config(args)
        if args.command == "train-victim":
            cmd_train_victim(cfg)
        elif args.command == "train-adversary":
            cmd_train_adversary(cfg, args.mode)
        elif args.command == "collect-demos":
            cmd_collect_demos(cfg)
        elif args.command == "train-expert":
            cmd_train_expert(cfg)
        elif args.command == "evaluate":
            print(cmd_evaluate(cfg, args.mode or list(EVAL_MODES)))
        elif args.command == "sweep":
            print(cmd_sweep(cfg, args.train))
    except GuidedAttackError as e:
        print(json.dumps({"error": e.kind, "message": str(e)}), file=sys.stderr)
        return 2
    except OSError as e:
        print(json.dumps({"error": "io", "message": str(e)}), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
