"""Behavior-cloned attack expert: mixture-of-experts networks trained by
Gaussian NLL, combined into a moment-matched ensemble.

Inside one mixture the router's softmax weights mix the expert heads' means
and standard deviations linearly. Across ensemble members the predictive
Gaussian takes the mean of the means and the total variance.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .adversary import ADV_ACTION_DIM, ADV_OBS_DIM
from .errors import FormatError, UsageError
from .nn import GaussianDist, MlpSpec

VAR_FLOOR = 1e-8


@dataclass(frozen=True)
class MoeSpec:
    n_experts: int = 3
    input_dim: int = ADV_OBS_DIM
    action_dim: int = ADV_ACTION_DIM
    expert_hidden: tuple = (64, 64)
    router_hidden: tuple = (32,)

    def __post_init__(self):
        if self.n_experts < 1:
            raise UsageError("need at least one expert")
        object.__setattr__(self, "expert_hidden", tuple(int(h) for h in self.expert_hidden))
        object.__setattr__(self, "router_hidden", tuple(int(h) for h in self.router_hidden))

    @property
    def expert(self) -> MlpSpec:
        return MlpSpec.gaussian((self.input_dim, *self.expert_hidden), self.action_dim)

    @property
    def router(self) -> MlpSpec:
        return MlpSpec((self.input_dim, *self.router_hidden, self.n_experts), "softmax")

    @property
    def n_params(self) -> int:
        return self.n_experts * self.expert.n_params + self.router.n_params

    def split(self, params: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        if params.shape != (self.n_params,):
            raise UsageError(f"expected {self.n_params} mixture parameters, got {params.shape}")
        k = self.expert.n_params
        return [params[i * k:(i + 1) * k] for i in range(self.n_experts)], params[self.n_experts * k:]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["expert_hidden"] = list(self.expert_hidden)
        d["router_hidden"] = list(self.router_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MoeSpec":
        return cls(**d)


def init_moe(spec: MoeSpec, seed: int) -> np.ndarray:
    parts = [nn.init_params(spec.expert, seed * 101 + i) for i in range(spec.n_experts)]
    parts.append(nn.init_params(spec.router, seed * 101 + spec.n_experts))
    return np.concatenate(parts)


def _parts_forward(params, spec: MoeSpec, s):
    experts, router = spec.split(params)
    outs = [nn.forward(p, spec.expert, s) for p in experts]
    w = nn.forward(router, spec.router, s)
    return outs, w


def _mix(outs, w) -> tuple[np.ndarray, np.ndarray]:
    mean = sum(w[..., i:i + 1] * o.mean for i, o in enumerate(outs))
    std = sum(w[..., i:i + 1] * o.std for i, o in enumerate(outs))
    return mean, std


def moe_forward(params: np.ndarray, spec: MoeSpec, s) -> GaussianDist:
    outs, w = _parts_forward(params, spec, s)
    mean, std = _mix(outs, w)
    return GaussianDist(mean, np.log(std))


def router_weights(params: np.ndarray, spec: MoeSpec, s) -> np.ndarray:
    return nn.forward(spec.split(params)[1], spec.router, s)


def bc_nll_loss(pred: GaussianDist, action) -> np.ndarray | float:
    """Per-sample sum over dims of log sigma + (a - mu)^2 / (2 sigma^2)."""
    action = np.asarray(action, dtype=np.float64)
    if action.shape[-1] != pred.dim:
        raise UsageError(f"action dim {action.shape[-1]} != prediction dim {pred.dim}")
    z = (action - pred.mean) / pred.std
    return np.sum(pred.log_std + 0.5 * z * z, axis=-1)


def moe_loss_and_grad(params: np.ndarray, spec: MoeSpec, states, actions) -> tuple[float, np.ndarray]:
    """Mean NLL over a batch and its gradient w.r.t. all mixture parameters."""
    states = np.atleast_2d(states)
    actions = np.atleast_2d(actions)
    n = len(states)
    outs, w = _parts_forward(params, spec, states)
    mean, std = _mix(outs, w)
    diff = actions - mean
    var = std * std
    loss = float(np.mean(np.sum(np.log(std) + 0.5 * diff * diff / var, axis=-1)))
    g_mean = -diff / var / n
    g_std = (1.0 / std - diff * diff / (var * std)) / n
    experts, router = spec.split(params)
    grads = []
    for i, (p, o) in enumerate(zip(experts, outs)):
        wi = w[:, i:i + 1]
        gm, gs = wi * g_mean, wi * g_std * o.std

        def fn(out, gm=gm, gs=gs):
            return 0.0, (gm, gs)

        grads.append(nn.param_gradient(p, spec.expert, states, fn))
    g_w = np.stack([np.sum(g_mean * o.mean + g_std * o.std, axis=-1) for o in outs], axis=-1)
    grads.append(nn.param_gradient(router, spec.router, states, lambda out: (0.0, g_w)))
    return loss, np.concatenate(grads)


def ensemble_aggregate(means, variances) -> GaussianDist:
    """Moment-match an equal-weight mixture of Gaussians.

    ``means`` and ``variances`` stack member outputs along the first axis.
    """
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    if means.shape != variances.shape or means.shape[0] < 1:
        raise UsageError("member means and variances must align and be non-empty")
    mu = means.mean(axis=0)
    var = (variances + means * means).mean(axis=0) - mu * mu
    var = np.maximum(var, VAR_FLOOR)
    return GaussianDist(mu, 0.5 * np.log(var))


@dataclass(frozen=True)
class BcConfig:
    epochs: int = 500
    batch_size: int = 128
    learning_rate: float = 3e-4
    patience: int = 20
    val_split: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.val_split < 1.0:
            raise UsageError("val_split must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise UsageError("epochs, batch_size and patience must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BcHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)


def stratified_split(flags: np.ndarray, val_split: float, rng: np.random.Generator):
    """Train/validation indices with the attack flag proportion preserved."""
    val = []
    for cls in (False, True):
        idx = np.flatnonzero(flags == cls)
        if len(idx) == 0:
            continue
        k = int(round(val_split * len(idx)))
        if len(idx) > 1:
            k = min(max(k, 1), len(idx) - 1)
        else:
            k = 0
        val.extend(rng.permutation(idx)[:k].tolist())
    val = np.sort(np.array(val, dtype=np.int64))
    train = np.setdiff1d(np.arange(len(flags)), val)
    return train, val


def train_bc(states, actions, spec: MoeSpec, seed: int, cfg: BcConfig = BcConfig()):
    """Minibatch Adam on the mixture NLL with early stopping on validation NLL.

    Returns ``(best_params, history)``.
    """
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if len(states) == 0 or len(states) < cfg.batch_size:
        raise UsageError(f"need at least one batch ({cfg.batch_size}) of samples, got {len(states)}")
    rng = np.random.default_rng([seed, 3])
    train, val = stratified_split(actions[:, 0] > 0, cfg.val_split, rng)
    if len(val) == 0:
        raise UsageError("validation split is empty")
    params = init_moe(spec, seed)
    opt = nn.Adam(params.size, lr=cfg.learning_rate)
    hist = BcHistory()
    best = params.copy()
    since_best = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(train)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, g = moe_loss_and_grad(params, spec, states[idx], actions[idx])
            params = opt.step(params, g)
            losses.append(loss * len(idx))
        hist.train_loss.append(float(np.sum(losses) / len(train)))
        v = float(np.mean(bc_nll_loss(moe_forward(params, spec, states[val]), actions[val])))
        hist.val_loss.append(v)
        if v < hist.best_val:
            hist.best_val, hist.best_epoch, best = v, epoch, params.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    return best, hist


@dataclass
class EnsembleExpert:
    spec: MoeSpec
    members: list
    seeds: list
    val_losses: list = field(default_factory=list)
    epochs_run: list = field(default_factory=list)

    def predict(self, states) -> GaussianDist:
        return expert_predict(self, states)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for m, (params, seed) in enumerate(zip(self.members, self.seeds)):
            experts, router = self.spec.split(params)
            for i, p in enumerate(experts):
                nn.save_params(d / f"member{m}_expert{i}.ckpt", p, self.spec.expert, seed)
            nn.save_params(d / f"member{m}_router.ckpt", router, self.spec.router, seed)
        manifest = {"M": len(self.members), "N": self.spec.n_experts, "spec": self.spec.to_dict(),
                    "seeds": list(self.seeds), "val_losses": list(self.val_losses),
                    "epochs_run": list(self.epochs_run)}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "EnsembleExpert":
        d = Path(directory)
        try:
            manifest = json.loads((d / "manifest.json").read_text())
        except FileNotFoundError as e:
            raise FormatError(f"{d}: no ensemble manifest") from e
        spec = MoeSpec.from_dict(manifest["spec"])
        members = []
        for m in range(manifest["M"]):
            parts = [nn.load_params(d / f"member{m}_expert{i}.ckpt", spec.expert)[0]
                     for i in range(spec.n_experts)]
            parts.append(nn.load_params(d / f"member{m}_router.ckpt", spec.router)[0])
            members.append(np.concatenate(parts))
        return cls(spec, members, manifest["seeds"], manifest["val_losses"], manifest["epochs_run"])


def train_ensemble(states, actions, spec: MoeSpec, seeds, cfg: BcConfig = BcConfig(),
                   log=None) -> EnsembleExpert:
    members, vals, runs = [], [], []
    for seed in seeds:
        params, hist = train_bc(states, actions, spec, seed, cfg)
        members.append(params)
        vals.append(hist.best_val)
        runs.append(hist.epochs_run)
        if log:
            log({"seed": seed, "epochs_run": hist.epochs_run, "best_val": hist.best_val})
    return EnsembleExpert(spec, members, list(seeds), vals, runs)


def expert_predict(ensemble: EnsembleExpert, states) -> GaussianDist:
    if not ensemble.members:
        raise UsageError("the ensemble has no trained members")
    outs = [moe_forward(p, ensemble.spec, states) for p in ensemble.members]
    return ensemble_aggregate([o.mean for o in outs], [o.var for o in outs])
