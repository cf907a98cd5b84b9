"""Demonstrations of successful attacks for cloning the expert.

Trajectories come from previously trained adversaries. Only episodes in which
an attack was launched and the victim then crashed are kept, and the
plentiful no-attack steps are undersampled.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adversary import ADV_ACTION_DIM, ADV_OBS_DIM, AttackEnv, episode_seed
from .env import ScenarioConfig
from .errors import FormatError, UsageError
from .perturb import PerturbConfig

FORMAT = "guided-attack-demos"
VERSION = 1


@dataclass
class RawEpisode:
    episode_id: int
    scenario: str
    success: bool
    states: np.ndarray  # (steps, 28)
    actions: np.ndarray  # (steps, 2): attack flag as +-1, desired action in [-1, 1]


@dataclass
class DemoDataset:
    states: np.ndarray
    actions: np.ndarray
    episode_ids: np.ndarray
    scenarios: list
    success: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64).reshape(-1, ADV_OBS_DIM)
        self.actions = np.asarray(self.actions, dtype=np.float64).reshape(-1, ADV_ACTION_DIM)
        self.episode_ids = np.asarray(self.episode_ids, dtype=np.int64).reshape(-1)
        self.success = np.asarray(self.success, dtype=bool).reshape(-1)
        self.scenarios = list(self.scenarios)
        n = len(self.states)
        if not (len(self.actions) == len(self.episode_ids) == len(self.success) == len(self.scenarios) == n):
            raise FormatError("dataset columns have different lengths")
        self.provenance = {k: list(self.provenance.get(k, [])) for k in ("sources", "scenarios", "seeds")}

    def __len__(self) -> int:
        return len(self.states)

    @property
    def attack_mask(self) -> np.ndarray:
        return self.actions[:, 0] > 0

    @property
    def counts(self) -> dict:
        n_att = int(self.attack_mask.sum())
        return {"attack": n_att, "non_attack": len(self) - n_att}

    def subset(self, idx) -> "DemoDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return DemoDataset(self.states[idx], self.actions[idx], self.episode_ids[idx],
                           [self.scenarios[i] for i in idx], self.success[idx], self.provenance)

    @classmethod
    def empty(cls) -> "DemoDataset":
        return cls(np.zeros((0, ADV_OBS_DIM)), np.zeros((0, ADV_ACTION_DIM)), [], [], [])

    def equals(self, other: "DemoDataset") -> bool:
        return (np.array_equal(self.states, other.states) and np.array_equal(self.actions, other.actions)
                and np.array_equal(self.episode_ids, other.episode_ids)
                and self.scenarios == other.scenarios and np.array_equal(self.success, other.success)
                and self.provenance == other.provenance)


def collect(adversary, victim, env_config: ScenarioConfig, n_episodes: int, seed: int, budget: int = 4,
            perturb_cfg: PerturbConfig = PerturbConfig()) -> list[RawEpisode]:
    """Roll out ``adversary`` deterministically and keep every step."""
    if n_episodes <= 0:
        raise UsageError("n_episodes must be positive")
    aenv = AttackEnv(env_config, victim, perturb_cfg, budget)
    out = []
    for ep in range(n_episodes):
        obs = aenv.reset(episode_seed(seed, ep))
        states, actions = [], []
        while True:
            step = aenv.step(adversary.mean_action(obs))
            states.append(obs)
            actions.append((1.0 if step.launched else -1.0, step.target))
            if step.done:
                break
            obs = step.observation
        log = aenv.log
        success = log.collision_step is not None and log.n_attacks > 0
        out.append(RawEpisode(ep, env_config.scenario, success, np.array(states), np.array(actions)))
    return out


def filter_successful(raw: list[RawEpisode]) -> list[RawEpisode]:
    kept = [e for e in raw if e.success]
    if not kept:
        warnings.warn("no successful attack episodes; the demonstration set is empty", stacklevel=2)
    return kept


def to_dataset(episodes: list[RawEpisode], source: str = "", seed: int | None = None) -> DemoDataset:
    if not episodes:
        ds = DemoDataset.empty()
    else:
        ds = DemoDataset(
            np.concatenate([e.states for e in episodes]),
            np.concatenate([e.actions for e in episodes]),
            np.concatenate([np.full(len(e.states), e.episode_id) for e in episodes]),
            [e.scenario for e in episodes for _ in range(len(e.states))],
            np.concatenate([np.full(len(e.states), e.success) for e in episodes]),
        )
    ds.provenance = {
        "sources": [source] if source else [],
        "scenarios": sorted({e.scenario for e in episodes}),
        "seeds": [] if seed is None else [seed],
    }
    return ds


def undersample_non_attack(ds: DemoDataset, ratio: float = 1.0, seed: int = 0) -> DemoDataset:
    """Keep every attack step and at most ``ratio`` non-attack steps per attack step."""
    if ratio <= 0:
        raise UsageError("ratio must be positive")
    att = np.flatnonzero(ds.attack_mask)
    non = np.flatnonzero(~ds.attack_mask)
    if len(att) == 0:
        raise UsageError("no attack samples to balance against")
    keep = int(np.floor(ratio * len(att)))
    if len(non) > keep:
        non = np.sort(np.random.default_rng(seed).choice(non, size=keep, replace=False))
    return ds.subset(np.sort(np.concatenate([att, non])))


def merge_scenarios(*datasets: DemoDataset) -> DemoDataset:
    if not datasets:
        return DemoDataset.empty()
    for d in datasets:
        if d.states.shape[1] != ADV_OBS_DIM or d.actions.shape[1] != ADV_ACTION_DIM:
            raise FormatError("sample dimensions do not match")
    out = DemoDataset(
        np.concatenate([d.states for d in datasets]),
        np.concatenate([d.actions for d in datasets]),
        np.concatenate([d.episode_ids for d in datasets]),
        [s for d in datasets for s in d.scenarios],
        np.concatenate([d.success for d in datasets]),
    )

    def union(key):
        seen = []
        for d in datasets:
            for v in d.provenance[key]:
                if v not in seen:
                    seen.append(v)
        return seen

    out.provenance = {"sources": union("sources"), "scenarios": sorted(union("scenarios")),
                      "seeds": union("seeds")}
    return out


def save(path, ds: DemoDataset) -> None:
    header = {"format": FORMAT, "version": VERSION, "state_dim": ADV_OBS_DIM, "action_dim": ADV_ACTION_DIM,
              "n_samples": len(ds), "counts": ds.counts, "provenance": ds.provenance}
    with open(Path(path), "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for i in range(len(ds)):
            f.write(json.dumps({"s": ds.states[i].tolist(), "a": ds.actions[i].tolist(),
                                "episode": int(ds.episode_ids[i]), "scenario": ds.scenarios[i],
                                "success": bool(ds.success[i])}) + "\n")


def load(path) -> DemoDataset:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        first = f.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: unreadable header") from e
        if header.get("format") != FORMAT or header.get("version") != VERSION:
            raise FormatError(f"{path}: not a version-{VERSION} demonstration file")
        if header.get("state_dim") != ADV_OBS_DIM or header.get("action_dim") != ADV_ACTION_DIM:
            raise FormatError(f"{path}: dims {header.get('state_dim')}/{header.get('action_dim')} "
                              f"do not match {ADV_OBS_DIM}/{ADV_ACTION_DIM}")
        n = header["n_samples"]
        states = np.empty((n, ADV_OBS_DIM))
        actions = np.empty((n, ADV_ACTION_DIM))
        eids, scen, succ = np.empty(n, dtype=np.int64), [], np.empty(n, dtype=bool)
        i = 0
        for line in f:
            if i >= n:
                raise FormatError(f"{path}: more samples than the header declares")
            try:
                rec = json.loads(line)
                states[i] = rec["s"]
                actions[i] = rec["a"]
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                raise FormatError(f"{path}: bad sample on line {i + 2}") from e
            eids[i] = rec["episode"]
            scen.append(rec["scenario"])
            succ[i] = rec["success"]
            i += 1
    if i != n:
        raise FormatError(f"{path}: expected {n} samples, found {i} (truncated?)")
    return DemoDataset(states, actions, eids, scen, succ, header.get("provenance", {}))
