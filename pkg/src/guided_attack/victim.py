"""Training and rolling out the PPO driving policy that gets attacked."""

from __future__ import annotations

import numpy as np

from .env import OBS_DIM, ScenarioConfig, TrafficEnv
from .ppo import GaussianPolicy, PpoConfig, PpoTrainer, RolloutBuffer, Transition, ValueFunction, sample_action

DEFAULT_HIDDEN = (64, 64)


def victim_accel(policy: GaussianPolicy, obs: np.ndarray, accel_max: float) -> float:
    """Deterministic victim command (policy mean) in m/s^2."""
    return float(policy.mean_action(obs)[0]) * accel_max


def train_victim(env_config: ScenarioConfig, ppo_config: PpoConfig, total_steps: int, seed: int,
                 hidden=DEFAULT_HIDDEN, log=None):
    """PPO on the driving reward. Returns ``(policy, critic, history)``."""
    rng = np.random.default_rng([seed, 1])
    policy = GaussianPolicy.create(OBS_DIM, hidden, 1, seed)
    critic = ValueFunction.create(OBS_DIM, hidden, seed + 7919)
    trainer = PpoTrainer(policy, critic, ppo_config)
    env = TrafficEnv(env_config)
    accel_max = env_config.accel_max
    history = []
    episode = 0
    steps = 0
    obs = env.reset(episode_seed=seed * 1_000_003 + episode)
    ep_ret, ep_returns, ep_collisions = 0.0, [], []
    iteration = 0
    while steps < total_steps:
        size = min(ppo_config.rollout_size, total_steps - steps)
        buf = RolloutBuffer(size)
        while not buf.full:
            a, logp = sample_action(trainer.policy, obs, rng)
            v = trainer.critic.value(obs)
            res = env.step(float(a[0]) * accel_max)
            buf.add(Transition(obs, a, logp, res.reward, v, res.done))
            ep_ret += res.reward
            steps += 1
            if res.done:
                ep_returns.append(ep_ret)
                ep_collisions.append(res.collision)
                ep_ret = 0.0
                episode += 1
                obs = env.reset(episode_seed=seed * 1_000_003 + episode)
            else:
                obs = res.observation
        buf.last_value = trainer.critic.value(obs)
        if size < ppo_config.minibatch_size:
            break
        stats = trainer.update(buf, rng)
        iteration += 1
        row = {
            "iteration": iteration,
            "mean_return": float(np.mean(ep_returns)) if ep_returns else float("nan"),
            "collision_rate": float(np.mean(ep_collisions)) if ep_collisions else float("nan"),
            **stats,
        }
        history.append(row)
        if log:
            log(row)
        ep_returns, ep_collisions = [], []
    return trainer.policy, trainer.critic, history
