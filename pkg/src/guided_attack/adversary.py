"""The attack agent: adversarial MDP wiring, PPO training in four guidance
modes, and deterministic evaluation.

The adversary sees the victim's observation, the victim's clean action and
its remaining budget. It outputs a gate signal and a desired victim action;
when the gate fires and budget remains, BIM perturbs the victim's observation
toward that action.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .env import OBS_DIM, ScenarioConfig, TrafficEnv
from .errors import ConfigError, UsageError
from .metrics import EpisodeRecord, Metrics, aggregate
from .perturb import PerturbConfig, apply_perturbation, generate_bim
from .ppo import GaussianPolicy, PpoConfig, PpoTrainer, RolloutBuffer, Transition, ValueFunction, sample_action

MODES = ("vanilla", "kl_guided", "value_penalty", "policy_constrained")
GUIDED_MODES = MODES[1:]
ADV_OBS_DIM = OBS_DIM + 2
ADV_ACTION_DIM = 2


@dataclass(frozen=True)
class AdvConfig:
    attack_budget: int = 4
    mode: str = "vanilla"
    eta: float = 1.0
    k: float = 1.0
    optimal_return: float = 1.0
    vprl_coef: float = 0.1
    pcrl_tolerance: float = 0.5
    pcrl_multiplier_init: float = 0.01
    pcrl_multiplier_lr: float = 0.05
    hidden: tuple = (64, 64)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.attack_budget < 1:
            raise ConfigError("attack budget must be at least 1")
        if self.eta < 0:
            raise ConfigError("eta must be non-negative")
        if self.k <= 0:
            raise ConfigError("annealing exponent must be positive")
        if self.vprl_coef < 0 or self.pcrl_multiplier_init < 0 or self.pcrl_multiplier_lr < 0:
            raise ConfigError("guidance coefficients must be non-negative")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdvConfig":
        return cls(**d)


def adversarial_reward(collision: bool, attacked_this_episode: bool, attack_caused: bool = True) -> float:
    """Unit reward at a collision step, but only once the adversary has attacked."""
    return 1.0 if collision and attacked_this_episode and attack_caused else 0.0


def attack_gate(x_raw: float, n: int) -> tuple[bool, int]:
    if n < 0:
        raise UsageError("remaining budget cannot be negative")
    if x_raw > 0 and n > 0:
        return True, n - 1
    return False, n


def update_beta(recent_returns, eta: float, k: float, optimal_return: float = 1.0) -> float:
    """Expert weight that shrinks as recent returns approach the optimum."""
    r = np.asarray(list(recent_returns), dtype=np.float64)
    if r.size == 0:
        raise UsageError("need at least one episode return")
    gap = max(0.0, float(np.mean(optimal_return - r)))
    return float(eta * gap ** k)


def adv_observation(obs: np.ndarray, victim_action: float, n: int, budget: int) -> np.ndarray:
    return np.concatenate([obs, [np.clip(victim_action, -1.0, 1.0), n / budget]])


def decode_action(raw) -> tuple[float, float]:
    """Raw policy output to (gate signal, desired victim action in [-1, 1])."""
    raw = np.asarray(raw, dtype=np.float64)
    return float(raw[0]), math.tanh(float(raw[1]))


@dataclass
class EpisodeLog:
    """What happened in one adversarial episode, kept for audits."""

    episode_seed: int
    attack_steps: list = field(default_factory=list)
    reward_steps: list = field(default_factory=list)
    collision_step: int | None = None
    goal_reached: bool = False
    end_reason: str = ""
    length: int = 0
    adv_return: float = 0.0
    victim_return: float = 0.0
    speed_sum: float = 0.0

    @property
    def n_attacks(self) -> int:
        return len(self.attack_steps)

    def record(self) -> EpisodeRecord:
        return EpisodeRecord(
            collision=self.collision_step is not None,
            goal_reached=self.goal_reached,
            n_attacks=self.n_attacks,
            mean_speed=self.speed_sum / max(self.length, 1),
            victim_return=self.victim_return,
            adv_return=self.adv_return,
            length=self.length,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("speed_sum")
        d["n_attacks"] = self.n_attacks
        d["collision"] = self.collision_step is not None
        return d


@dataclass
class AttackStep:
    observation: np.ndarray
    reward: float
    done: bool
    launched: bool
    target: float
    collision: bool


class AttackEnv:
    """Wraps a driving episode with a frozen victim and the attack budget.

    With ``reset_on_exhaustion`` an episode also ends as soon as the budget is
    spent, as during training; evaluation lets the episode play out.
    """

    def __init__(self, env_config: ScenarioConfig, victim: GaussianPolicy, perturb_cfg: PerturbConfig,
                 budget: int, reset_on_exhaustion: bool = False):
        self.env = TrafficEnv(env_config)
        self.victim = victim
        self.perturb_cfg = perturb_cfg
        self.budget = budget
        self.reset_on_exhaustion = reset_on_exhaustion
        self.accel_max = env_config.accel_max
        self.n = budget
        self.log: EpisodeLog | None = None
        self._obs: np.ndarray | None = None
        self._victim_action = 0.0

    def reset(self, episode_seed: int) -> np.ndarray:
        self._obs = self.env.reset(episode_seed)
        self.n = self.budget
        self.log = EpisodeLog(episode_seed=int(episode_seed))
        return self._adv_obs()

    def _adv_obs(self) -> np.ndarray:
        self._victim_action = float(self.victim.mean_action(self._obs)[0])
        return adv_observation(self._obs, self._victim_action, self.n, self.budget)

    def step(self, raw_action) -> AttackStep:
        x_raw, target = decode_action(raw_action)
        launched, self.n = attack_gate(x_raw, self.n)
        action = self._victim_action
        if launched:
            delta = generate_bim(self.victim, self._obs, target, self.perturb_cfg)
            seen = apply_perturbation(self._obs, True, delta)
            action = float(self.victim.mean_action(seen)[0])
        log = self.log
        t = log.length
        if launched:
            log.attack_steps.append(t)
        res = self.env.step(action * self.accel_max, perturbed=launched)
        reward = adversarial_reward(res.collision, log.n_attacks > 0)
        log.length += 1
        log.victim_return += res.reward
        log.speed_sum += res.ego_speed
        log.adv_return += reward
        if reward:
            log.reward_steps.append(t)
        if res.collision:
            log.collision_step = t
        log.goal_reached = res.goal_reached
        done = res.done
        if res.collision:
            log.end_reason = "collision"
        elif res.goal_reached:
            log.end_reason = "goal"
        elif res.done:
            log.end_reason = "timeout"
        elif self.reset_on_exhaustion and self.n == 0:
            log.end_reason = "budget"
            done = True
        self._obs = res.observation
        obs = self._adv_obs()
        return AttackStep(obs, reward, done, launched, target, res.collision)


def make_adversary(adv_cfg: AdvConfig, seed: int) -> tuple[GaussianPolicy, ValueFunction]:
    policy = GaussianPolicy.create(ADV_OBS_DIM, adv_cfg.hidden, ADV_ACTION_DIM, seed)
    critic = ValueFunction.create(ADV_OBS_DIM, adv_cfg.hidden, seed + 7919)
    return policy, critic


def episode_seed(seed: int, episode: int) -> int:
    return seed * 1_000_003 + episode


@dataclass
class TrainingResult:
    policy: GaussianPolicy
    critic: ValueFunction
    log: list
    episodes: list


def run_training(env_config: ScenarioConfig, victim: GaussianPolicy, expert, adv_cfg: AdvConfig,
                 ppo_cfg: PpoConfig, perturb_cfg: PerturbConfig, iterations: int, seed: int,
                 progress=None) -> TrainingResult:
    """Train an adversary with PPO for ``iterations`` rollouts.

    ``expert`` is anything with ``predict(states) -> GaussianDist`` and is
    required for the guided modes. The victim is never modified.
    """
    mode = adv_cfg.mode
    if mode in GUIDED_MODES and expert is None:
        raise ConfigError(f"mode {mode!r} needs a trained expert")
    if iterations < 0:
        raise UsageError("iterations must be non-negative")
    predictor = expert.predict if expert is not None else None
    policy, critic = make_adversary(adv_cfg, seed)
    trainer = PpoTrainer(policy, critic, ppo_cfg)
    rng = np.random.default_rng([seed, 2])
    aenv = AttackEnv(env_config, victim, perturb_cfg, adv_cfg.attack_budget, reset_on_exhaustion=True)
    episode = 0
    obs = aenv.reset(episode_seed(seed, episode))
    beta = 0.0
    multiplier = adv_cfg.pcrl_multiplier_init
    log, episodes = [], []
    timesteps = 0
    for it in range(1, iterations + 1):
        buf = RolloutBuffer(ppo_cfg.rollout_size)
        finished = []
        while not buf.full:
            a, logp = sample_action(trainer.policy, obs, rng)
            v = trainer.critic.value(obs)
            step = aenv.step(a)
            reward = step.reward
            if mode == "value_penalty":
                kl = float(nn.gaussian_kl(trainer.policy.dist(obs), predictor(obs[None])).reshape(-1)[0])
                reward -= adv_cfg.vprl_coef * kl
            buf.add(Transition(obs, a, logp, reward, v, step.done))
            timesteps += 1
            if step.done:
                entry = aenv.log.to_dict()
                entry["iteration"] = it
                entry["episode"] = episode
                episodes.append(entry)
                finished.append(aenv.log)
                episode += 1
                obs = aenv.reset(episode_seed(seed, episode))
            else:
                obs = step.observation
        buf.last_value = trainer.critic.value(obs)
        returns = [e.adv_return for e in finished]
        if mode == "kl_guided" and returns:
            beta = update_beta(returns, adv_cfg.eta, adv_cfg.k, adv_cfg.optimal_return)
        elif mode == "policy_constrained":
            beta = multiplier
        elif mode in ("vanilla", "value_penalty"):
            beta = 0.0
        stats = trainer.update(buf, rng, predictor, beta)
        if mode == "policy_constrained":
            multiplier = max(0.0, multiplier + adv_cfg.pcrl_multiplier_lr
                             * (stats["mean_kl_to_expert"] - adv_cfg.pcrl_tolerance))
        row = {
            "iteration": it,
            "timesteps": timesteps,
            "mode": mode,
            "mean_return": float(np.mean(returns)) if returns else float("nan"),
            "collision_rate": float(np.mean([e.collision_step is not None for e in finished]))
            if finished else float("nan"),
            "mean_attacks": float(np.mean([e.n_attacks for e in finished])) if finished else float("nan"),
            "beta": float(beta),
            "multiplier": float(multiplier) if mode == "policy_constrained" else 0.0,
            "episodes_this_iter": len(finished),
            **stats,
        }
        log.append(row)
        if progress:
            progress(row)
    return TrainingResult(trainer.policy, trainer.critic, log, episodes)


def run_episodes(adversary: GaussianPolicy | None, victim: GaussianPolicy, env_config: ScenarioConfig,
                 budget: int, perturb_cfg: PerturbConfig, n_episodes: int, seed: int) -> list[EpisodeLog]:
    """Deterministic rollouts to natural termination. ``adversary=None`` never attacks."""
    if n_episodes <= 0:
        raise UsageError("n_episodes must be positive")
    aenv = AttackEnv(env_config, victim, perturb_cfg, budget, reset_on_exhaustion=False)
    never = np.array([-1.0, 0.0])
    logs = []
    for ep in range(n_episodes):
        obs = aenv.reset(episode_seed(seed, ep))
        while True:
            raw = never if adversary is None else adversary.mean_action(obs)
            step = aenv.step(raw)
            if step.done:
                break
            obs = step.observation
        logs.append(aenv.log)
    return logs


def evaluate_adversary(adversary: GaussianPolicy | None, victim: GaussianPolicy, env_config: ScenarioConfig,
                       n_episodes: int, seed: int, budget: int = 4,
                       perturb_cfg: PerturbConfig = PerturbConfig()) -> Metrics:
    logs = run_episodes(adversary, victim, env_config, budget, perturb_cfg, n_episodes, seed)
    return aggregate([e.record() for e in logs], seeds=[seed])


def with_mode(adv_cfg: AdvConfig, mode: str) -> AdvConfig:
    return replace(adv_cfg, mode=mode)
