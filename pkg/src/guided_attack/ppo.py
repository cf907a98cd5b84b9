"""Clipped-surrogate PPO with GAE and an optional KL pull toward an expert.

The same update serves the victim (no expert, ``beta = 0``) and every
adversary mode. Objectives are written to be *maximised*:

    actor_loss - beta * mean KL(pi || expert) - c1 * critic_loss + c2 * entropy

and the optimiser performs Adam descent on the negated gradient.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .errors import ConfigError, NumericError, ShapeError, UsageError
from .nn import GaussianDist, MlpSpec

ENTROPY_CONST = 0.5 * math.log(2.0 * math.pi * math.e)


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_ratio: float = 0.2
    critic_coef: float = 0.5
    entropy_coef: float = 0.0
    epochs: int = 10
    minibatch_size: int = 64
    learning_rate: float = 3e-4
    rollout_size: int = 2048
    max_grad_norm: float = 0.5
    normalize_advantages: bool = True

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0 or not 0.0 <= self.lam <= 1.0:
            raise ConfigError("gamma must lie in (0,1) and lambda in [0,1]")
        if self.clip_ratio <= 0 or self.epochs < 1 or self.minibatch_size < 1:
            raise ConfigError("clip_ratio, epochs and minibatch_size must be positive")
        if self.learning_rate < 0 or self.critic_coef < 0 or self.entropy_coef < 0:
            raise ConfigError("learning rate and loss coefficients must be non-negative")
        if self.rollout_size < self.minibatch_size:
            raise ConfigError("rollout_size must be >= minibatch_size")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"] = "adam(beta1=0.9, beta2=0.999, eps=1e-8), constant step size"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PpoConfig":
        d = {k: v for k, v in d.items() if k != "optimizer"}
        return cls(**d)


class GaussianPolicy:
    """Tanh MLP producing action means plus a state-independent log-std vector.

    ``params`` is the MLP parameters followed by ``action_dim`` log-stds.
    """

    def __init__(self, spec: MlpSpec, params: np.ndarray):
        if spec.head != "linear":
            raise ShapeError("policy MLP must have a linear head producing means")
        if params.shape != (spec.n_params + spec.output_dim,):
            raise ShapeError(f"expected {spec.n_params + spec.output_dim} policy parameters")
        self.spec = spec
        self.params = params

    @classmethod
    def create(cls, obs_dim: int, hidden, action_dim: int, seed: int) -> "GaussianPolicy":
        spec = MlpSpec((obs_dim, *hidden, action_dim))
        mlp = nn.init_params(spec, seed)
        # small output layer keeps initial means near zero
        W, _ = nn.layers(mlp, spec)[-1]
        W *= 0.01
        return cls(spec, np.concatenate([mlp, np.full(action_dim, nn.LOG_STD_INIT)]))

    @property
    def action_dim(self) -> int:
        return self.spec.output_dim

    @property
    def mlp_params(self) -> np.ndarray:
        return self.params[: self.spec.n_params]

    @property
    def log_std(self) -> np.ndarray:
        return self.params[self.spec.n_params:]

    def dist(self, obs) -> GaussianDist:
        mean = nn.forward(self.mlp_params, self.spec, obs)
        ls = np.clip(self.log_std, nn.LOG_STD_MIN, nn.LOG_STD_MAX)
        return GaussianDist(mean, np.broadcast_to(ls, mean.shape).copy())

    def mean_action(self, obs) -> np.ndarray:
        return nn.forward(self.mlp_params, self.spec, obs)

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.spec, self.params.copy())

    def save(self, path, seed: int | None = None, extra: dict | None = None) -> None:
        spec = MlpSpec(self.spec.layer_sizes[:-1] + (2 * self.action_dim,), "gaussian")
        # stored as a gaussian-head layout: mean rows from the MLP, log-std in the last bias
        nn.save_params(path, _pack_policy(self), spec, seed, extra)

    @classmethod
    def load(cls, path) -> "GaussianPolicy":
        packed, spec, _ = nn.load_params(path)
        if spec.head != "gaussian":
            raise ShapeError(f"{path}: not a policy checkpoint")
        return _unpack_policy(packed, spec)


def _pack_policy(policy: GaussianPolicy) -> np.ndarray:
    d = policy.action_dim
    gspec = MlpSpec(policy.spec.layer_sizes[:-1] + (2 * d,), "gaussian")
    packed = np.zeros(gspec.n_params)
    src = nn.layers(policy.mlp_params, policy.spec)
    dst = nn.layers(packed, gspec)
    for (W, b), (gW, gb) in zip(src[:-1], dst[:-1]):
        gW[...] = W
        gb[...] = b
    W, b = src[-1]
    gW, gb = dst[-1]
    gW[:, :d] = W
    gb[:d] = b
    gb[d:] = policy.log_std
    return packed


def _unpack_policy(packed: np.ndarray, gspec: MlpSpec) -> GaussianPolicy:
    d = gspec.action_dim
    spec = MlpSpec(gspec.layer_sizes[:-1] + (d,))
    mlp = np.zeros(spec.n_params)
    src = nn.layers(packed, gspec)
    dst = nn.layers(mlp, spec)
    for (gW, gb), (W, b) in zip(src[:-1], dst[:-1]):
        W[...] = gW
        b[...] = gb
    gW, gb = src[-1]
    W, b = dst[-1]
    W[...] = gW[:, :d]
    b[...] = gb[:d]
    return GaussianPolicy(spec, np.concatenate([mlp, gb[d:]]))


class ValueFunction:
    def __init__(self, spec: MlpSpec, params: np.ndarray):
        self.spec = spec
        self.params = params

    @classmethod
    def create(cls, obs_dim: int, hidden, seed: int) -> "ValueFunction":
        spec = MlpSpec((obs_dim, *hidden, 1))
        return cls(spec, nn.init_params(spec, seed))

    def value(self, obs) -> np.ndarray | float:
        v = nn.forward(self.params, self.spec, obs)
        return float(v[0]) if np.ndim(v) == 1 else v[:, 0]

    def save(self, path, seed: int | None = None) -> None:
        nn.save_params(path, self.params, self.spec, seed)

    @classmethod
    def load(cls, path) -> "ValueFunction":
        params, spec, _ = nn.load_params(path)
        return cls(spec, params)


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    log_prob: float
    reward: float
    value: float
    done: bool
    attacked: bool = False


@dataclass
class RolloutBuffer:
    capacity: int
    transitions: list = field(default_factory=list)
    last_value: float = 0.0

    def add(self, t: Transition) -> None:
        if self.full:
            raise UsageError("rollout buffer is full")
        self.transitions.append(t)

    @property
    def full(self) -> bool:
        return len(self.transitions) >= self.capacity

    def __len__(self) -> int:
        return len(self.transitions)

    def arrays(self) -> dict:
        ts = self.transitions
        return {
            "states": np.array([t.state for t in ts]),
            "actions": np.array([t.action for t in ts]),
            "log_probs": np.array([t.log_prob for t in ts]),
            "rewards": np.array([t.reward for t in ts]),
            "values": np.array([t.value for t in ts]),
            "dones": np.array([t.done for t in ts], dtype=bool),
        }


def compute_gae(rewards, values, dones, last_value: float, gamma: float, lam: float):
    """Advantages and value targets; episodes are cut wherever ``dones`` is set.

    ``last_value`` bootstraps the final transition when it is not terminal.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    n = len(rewards)
    if n == 0:
        raise UsageError("cannot compute advantages on an empty buffer")
    adv = np.zeros(n)
    running = 0.0
    for i in range(n - 1, -1, -1):
        next_v = last_value if i == n - 1 else values[i + 1]
        nonterminal = 0.0 if dones[i] else 1.0
        delta = rewards[i] + gamma * next_v * nonterminal - values[i]
        running = delta + gamma * lam * nonterminal * running
        adv[i] = running
    return adv, adv + values


def normalize(adv: np.ndarray) -> np.ndarray:
    if len(adv) < 2:
        return adv - adv.mean()
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def clipped_actor_loss(ratio, advantage, clip_ratio: float) -> float:
    ratio = np.asarray(ratio, dtype=np.float64)
    if np.any(ratio <= 0.0):
        raise NumericError("probability ratios must be positive")
    advantage = np.asarray(advantage, dtype=np.float64)
    clipped = np.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio)
    return float(np.mean(np.minimum(clipped * advantage, ratio * advantage)))


def critic_loss(values, targets) -> float:
    values = np.asarray(values, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if values.shape != targets.shape:
        raise ShapeError(f"values {values.shape} vs targets {targets.shape}")
    return float(np.mean((values - targets) ** 2))


def entropy(d: GaussianDist) -> np.ndarray | float:
    h = np.sum(ENTROPY_CONST + d.log_std, axis=-1)
    return float(h) if np.ndim(h) == 0 else h


def total_objective(actor_loss: float, critic_loss: float, entropy: float, c1: float, c2: float,
                    kl_term: float = 0.0, beta: float = 0.0) -> float:
    if beta < 0:
        raise ConfigError("beta must be non-negative")
    obj = actor_loss - c1 * critic_loss + c2 * entropy
    if beta:
        obj = obj - beta * kl_term
    return obj


def objective_and_grads(policy: GaussianPolicy, critic: ValueFunction, batch: dict,
                        config: PpoConfig, expert: GaussianDist | None = None, beta: float = 0.0):
    """Value of the total objective on one minibatch and its gradients.

    Returns ``(objective, policy_grad, critic_grad, stats)``; gradients are
    for ascent.
    """
    states = batch["states"]
    actions = batch["actions"]
    adv = batch["advantages"]
    old_logp = batch["log_probs"]
    targets = batch["targets"]
    B = len(states)
    spec = policy.spec
    raw_ls = policy.log_std
    ls_mask = (raw_ls >= nn.LOG_STD_MIN) & (raw_ls <= nn.LOG_STD_MAX)
    stats = {}

    def actor_loss_fn(mean):
        d = GaussianDist(mean, np.broadcast_to(np.clip(raw_ls, nn.LOG_STD_MIN, nn.LOG_STD_MAX),
                                               mean.shape))
        logp = nn.gaussian_log_prob(d, actions)
        ratio = np.exp(logp - old_logp)
        a_loss = clipped_actor_loss(ratio, adv, config.clip_ratio)
        surr1 = ratio * adv
        surr2 = np.clip(ratio, 1 - config.clip_ratio, 1 + config.clip_ratio) * adv
        d_logp = np.where(surr1 <= surr2, ratio * adv, 0.0) / B
        g_mean, g_ls = nn.gaussian_log_prob_grad(d, actions)
        obj_mean = d_logp[:, None] * g_mean
        obj_ls = np.sum(d_logp[:, None] * g_ls, axis=0)
        h = entropy(GaussianDist(d.mean[0], d.log_std[0]))
        obj = a_loss + config.entropy_coef * h
        obj_ls = obj_ls + config.entropy_coef
        kl_mean = 0.0
        if expert is not None:
            kl = nn.gaussian_kl(d, expert)
            kl_mean = float(np.mean(kl))
            if beta:
                k_mean, k_ls = nn.gaussian_kl_grad(d, expert)
                obj -= beta * kl_mean
                obj_mean = obj_mean - beta * k_mean / B
                obj_ls = obj_ls - beta * np.sum(k_ls, axis=0) / B
        stats.update(actor_loss=a_loss, entropy=h, kl=kl_mean,
                     clip_fraction=float(np.mean(np.abs(ratio - 1.0) > config.clip_ratio)))
        stats["_obj_ls"] = obj_ls
        # value_and_grad minimises: hand back the negated objective
        return -obj, -obj_mean

    neg_obj_a, g_mlp, _ = nn.value_and_grad(policy.mlp_params, spec, states, actor_loss_fn)
    g_policy = np.concatenate([-g_mlp, np.where(ls_mask, stats.pop("_obj_ls"), 0.0)])

    def critic_loss_fn(out):
        v = out[:, 0]
        c_loss = critic_loss(v, targets)
        stats["critic_loss"] = c_loss
        return c_loss, (2.0 * (v - targets) / B)[:, None]

    c_loss, g_critic, _ = nn.value_and_grad(critic.params, critic.spec, states, critic_loss_fn)
    objective = -neg_obj_a - config.critic_coef * c_loss
    return objective, g_policy, -config.critic_coef * g_critic, stats


class PpoTrainer:
    """Owns the policy/critic parameters and their optimiser state."""

    def __init__(self, policy: GaussianPolicy, critic: ValueFunction, config: PpoConfig):
        self.policy = policy
        self.critic = critic
        self.config = config
        n = policy.params.size + critic.params.size
        self.optimizer = nn.Adam(n, lr=config.learning_rate)

    def update(self, buffer: RolloutBuffer, rng: np.random.Generator,
               expert_predictor: Callable[[np.ndarray], GaussianDist] | None = None,
               beta: float = 0.0) -> dict:
        cfg = self.config
        if beta > 0 and expert_predictor is None:
            raise ConfigError("beta > 0 requires an expert predictor")
        if len(buffer) == 0:
            raise UsageError("cannot update on an empty buffer")
        data = buffer.arrays()
        adv, targets = compute_gae(data["rewards"], data["values"], data["dones"],
                                   buffer.last_value, cfg.gamma, cfg.lam)
        if cfg.normalize_advantages:
            adv = normalize(adv)
        data["advantages"] = adv
        data["targets"] = targets
        expert_all = expert_predictor(data["states"]) if expert_predictor is not None else None
        n = len(adv)
        n_pol = self.policy.params.size
        keys = ("states", "actions", "log_probs", "advantages", "targets")
        acc = {"actor_loss": [], "critic_loss": [], "entropy": [], "kl": [], "clip_fraction": []}
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            for start in range(0, n, cfg.minibatch_size):
                idx = order[start:start + cfg.minibatch_size]
                batch = {k: data[k][idx] for k in keys}
                exp_b = None
                if expert_all is not None:
                    exp_b = GaussianDist(expert_all.mean[idx], expert_all.log_std[idx])
                _, g_pol, g_crit, st = objective_and_grads(self.policy, self.critic, batch, cfg,
                                                           exp_b, beta)
                for k in acc:
                    acc[k].append(st[k])
                if cfg.learning_rate == 0.0:
                    continue
                grad = nn.clip_by_norm(np.concatenate([g_pol, g_crit]), cfg.max_grad_norm)
                flat = np.concatenate([self.policy.params, self.critic.params])
                flat = self.optimizer.step(flat, -grad)
                self.policy.params = flat[:n_pol].copy()
                self.critic.params = flat[n_pol:].copy()
        stats = {k: float(np.mean(v)) for k, v in acc.items()}
        stats["mean_kl_to_expert"] = stats.pop("kl")
        return stats


def sample_action(policy: GaussianPolicy, obs: np.ndarray, rng: np.random.Generator):
    d = policy.dist(obs)
    a = d.sample(rng)
    return a, nn.gaussian_log_prob(d, a)
