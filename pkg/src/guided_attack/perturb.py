"""Targeted observation perturbations via the Basic Iterative Method.

The attack loss is the squared distance between the victim's deterministic
action (its Gaussian mean) and the adversary's desired action. BIM takes
signed-gradient steps of size ``epsilon / iterations`` and projects back onto
the l-inf ball around the clean observation and onto the valid observation
box [-1, 1].
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .errors import ConfigError, NumericError, ShapeError

OBS_LOW, OBS_HIGH = -1.0, 1.0


@dataclass(frozen=True)
class PerturbConfig:
    epsilon: float = 0.1
    iterations: int = 50

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("perturbation budget must be non-negative")
        if self.iterations < 1:
            raise ConfigError("BIM needs at least one iteration")

    @property
    def step_size(self) -> float:
        return self.epsilon / self.iterations

    def to_dict(self) -> dict:
        return asdict(self)


def target_loss(victim, state: np.ndarray, target: float) -> float:
    mean = victim.mean_action(state)
    return 0.5 * float(np.sum((mean - target) ** 2))


def generate_bim(victim, state, target: float, cfg: PerturbConfig) -> np.ndarray:
    """Perturbation pushing ``victim``'s mean action toward ``target``.

    ``victim`` is a :class:`~guided_attack.ppo.GaussianPolicy`; ``target`` is in
    the victim's normalised action units. Returns the best iterate seen, so the
    final loss never exceeds the clean-state loss.
    """
    s0 = np.asarray(state, dtype=np.float64)
    if s0.shape != (victim.spec.input_dim,):
        raise ShapeError(f"state shape {s0.shape} does not match victim input")
    if cfg.epsilon == 0.0:
        return np.zeros_like(s0)
    params, spec = victim.mlp_params, victim.spec
    lo = np.maximum(s0 - cfg.epsilon, OBS_LOW)
    hi = np.minimum(s0 + cfg.epsilon, OBS_HIGH)
    alpha = cfg.step_size

    def loss_fn(out):
        diff = out - target
        return 0.5 * float(diff @ diff), diff

    s = s0.copy()
    best_s, best_loss = s0, None
    for _ in range(cfg.iterations):
        loss, _, g = nn.value_and_grad(params, spec, s, loss_fn)
        if best_loss is None or loss < best_loss:
            best_s, best_loss = s, loss
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite input gradient in BIM")
        s = np.clip(s - alpha * np.sign(g), lo, hi)
    final = target_loss(victim, s, target)
    if best_loss is None or final < best_loss:
        best_s = s
    return best_s - s0


def apply_perturbation(state, attack: bool, delta) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    if not attack:
        return state
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != state.shape:
        raise ShapeError(f"perturbation shape {delta.shape} != state shape {state.shape}")
    return np.clip(state + delta, OBS_LOW, OBS_HIGH)
