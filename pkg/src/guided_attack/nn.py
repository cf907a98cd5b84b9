"""Small feed-forward networks on flat float64 parameter vectors.

Every network in the package (victim policy, adversary actor and critic,
MoE experts and routers) is an :class:`MlpSpec` plus a flat ``np.ndarray`` of
parameters. Gradients are computed by hand-written reverse mode over the
tanh MLP and its output head; there is no general autodiff here.

Loss functions passed to :func:`value_and_grad` take the network output and
return ``(loss, grad_wrt_output)``. For a gaussian head the output is a
:class:`GaussianDist` and the gradient is a ``(d_mean, d_log_std)`` pair.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import FormatError, InputError, NumericError, ShapeError, SpecError

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_STD_INIT = -0.5
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

HEADS = ("linear", "gaussian", "softmax")

# A ParameterSet is a flat float64 vector laid out as (W_0, b_0, W_1, b_1, ...)
# with each W_l stored row-major with shape (size_l, size_{l+1}).
ParameterSet = np.ndarray


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    head: str = "linear"
    hidden_activation: str = "tanh"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise SpecError(f"need at least input and output sizes, got {sizes}")
        if any(s < 1 for s in sizes):
            raise SpecError(f"layer sizes must be positive, got {sizes}")
        if self.head not in HEADS:
            raise SpecError(f"unknown output head {self.head!r}")
        if self.hidden_activation != "tanh":
            raise SpecError("only tanh hidden activations are supported")
        if self.head == "gaussian" and sizes[-1] % 2:
            raise SpecError("gaussian head needs an even output size (means and log-stds)")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def action_dim(self) -> int:
        if self.head != "gaussian":
            raise SpecError("action_dim is only defined for gaussian heads")
        return self.layer_sizes[-1] // 2

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "head": self.head,
            "hidden_activation": self.hidden_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["layer_sizes"]), d.get("head", "linear"), d.get("hidden_activation", "tanh"))

    @classmethod
    def gaussian(cls, sizes, action_dim: int) -> "MlpSpec":
        return cls(tuple(sizes) + (2 * action_dim,), "gaussian")


@dataclass(frozen=True)
class GaussianDist:
    """Diagonal Gaussian; arrays may carry a leading batch axis."""

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        log_std = np.asarray(self.log_std, dtype=np.float64)
        if mean.shape != log_std.shape:
            raise ShapeError(f"mean shape {mean.shape} != log_std shape {log_std.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_std", log_std)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    @property
    def var(self) -> np.ndarray:
        return np.exp(2.0 * self.log_std)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal(self.mean.shape)

    def clamped(self) -> "GaussianDist":
        return GaussianDist(self.mean, np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX))


@lru_cache(maxsize=None)
def _layout(spec: MlpSpec) -> tuple[tuple[int, int, slice, slice], ...]:
    out = []
    offset = 0
    for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        w = slice(offset, offset + n_in * n_out)
        offset += n_in * n_out
        b = slice(offset, offset + n_out)
        offset += n_out
        out.append((n_in, n_out, w, b))
    return tuple(out)


def layers(params: ParameterSet, spec: MlpSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """(W, b) views into ``params``; writing to them mutates ``params``."""
    if params.shape != (spec.n_params,):
        raise ShapeError(f"expected {spec.n_params} parameters, got {params.shape}")
    return [(params[w].reshape(n_in, n_out), params[b]) for n_in, n_out, w, b in _layout(spec)]


def init_params(spec: MlpSpec, seed: int) -> ParameterSet:
    if not isinstance(spec, MlpSpec):
        raise SpecError(f"expected MlpSpec, got {type(spec).__name__}")
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.n_params, dtype=np.float64)
    for W, _b in layers(params, spec):
        n_in, n_out = W.shape
        limit = math.sqrt(6.0 / (n_in + n_out))
        W[...] = rng.uniform(-limit, limit, size=W.shape)
    if spec.head == "gaussian":
        W, b = layers(params, spec)[-1]
        d = spec.action_dim
        W[:, d:] = 0.0
        b[d:] = LOG_STD_INIT
    return params


def _check_input(spec: MlpSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != spec.input_dim:
        raise ShapeError(f"input shape {x.shape} does not match input dim {spec.input_dim}")
    if not np.all(np.isfinite(x)):
        raise InputError("non-finite network input")
    return x


def _forward_raw(params: ParameterSet, spec: MlpSpec, x: np.ndarray):
    """Pre-head output plus the per-layer inputs needed by the backward pass."""
    acts = []
    h = x
    ls = layers(params, spec)
    last = len(ls) - 1
    for i, (W, b) in enumerate(ls):
        acts.append(h)
        h = h @ W + b
        if i < last:
            h = np.tanh(h)
        if not np.all(np.isfinite(h)):
            raise NumericError(f"non-finite activation at layer {i}")
    return h, acts


def _apply_head(spec: MlpSpec, raw: np.ndarray):
    if spec.head == "linear":
        return raw
    if spec.head == "softmax":
        z = raw - raw.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    d = spec.action_dim
    return GaussianDist(raw[..., :d], np.clip(raw[..., d:], LOG_STD_MIN, LOG_STD_MAX))


def forward(params: ParameterSet, spec: MlpSpec, x):
    """Evaluate the network on one input (1-D) or a batch (2-D)."""
    x = _check_input(spec, x)
    raw, _ = _forward_raw(params, spec, x)
    return _apply_head(spec, raw)


def _head_backward(spec: MlpSpec, raw: np.ndarray, out, g_out) -> np.ndarray:
    if spec.head == "linear":
        return np.asarray(g_out, dtype=np.float64)
    if spec.head == "softmax":
        g = np.asarray(g_out, dtype=np.float64)
        return out * (g - np.sum(out * g, axis=-1, keepdims=True))
    d = spec.action_dim
    g_mean, g_log_std = g_out
    raw_ls = raw[..., d:]
    inside = (raw_ls >= LOG_STD_MIN) & (raw_ls <= LOG_STD_MAX)
    return np.concatenate(
        [np.broadcast_to(g_mean, raw_ls.shape), np.where(inside, g_log_std, 0.0)], axis=-1
    )


def _backward(params, spec, acts, g_raw):
    grad = np.zeros_like(params)
    g = g_raw
    ls = layers(params, spec)
    gls = layers(grad, spec)
    for i in range(len(ls) - 1, -1, -1):
        W, _ = ls[i]
        gW, gb = gls[i]
        a_in = acts[i]
        if a_in.ndim == 1:
            gW[...] = np.outer(a_in, g)
            gb[...] = g
        else:
            gW[...] = a_in.T @ g
            gb[...] = g.sum(axis=0)
        g = g @ W.T
        if i > 0:
            g = g * (1.0 - a_in * a_in)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at layer {i}")
    return grad, g


LossFn = Callable[[object], tuple]


def value_and_grad(params: ParameterSet, spec: MlpSpec, x, loss_fn: LossFn):
    """Return ``(loss, d loss/d params, d loss/d input)``."""
    x = _check_input(spec, x)
    raw, acts = _forward_raw(params, spec, x)
    out = _apply_head(spec, raw)
    loss, g_out = loss_fn(out)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss value")
    g_raw = _head_backward(spec, raw, out, g_out)
    g_params, g_x = _backward(params, spec, acts, g_raw)
    return float(loss), g_params, g_x


def param_gradient(params: ParameterSet, spec: MlpSpec, x, loss_fn: LossFn) -> np.ndarray:
    return value_and_grad(params, spec, x, loss_fn)[1]


def input_gradient(params: ParameterSet, spec: MlpSpec, x, loss_fn: LossFn) -> np.ndarray:
    return value_and_grad(params, spec, x, loss_fn)[2]


def _check_same_dim(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"{what}: dimension {a.shape[-1]} != {b.shape[-1]}")


def gaussian_log_prob(d: GaussianDist, action) -> np.ndarray | float:
    """Log density summed over the last axis (one value per batch row)."""
    action = np.asarray(action, dtype=np.float64)
    _check_same_dim(d.mean, action, "gaussian_log_prob")
    z = (action - d.mean) * np.exp(-d.log_std)
    lp = np.sum(-d.log_std - HALF_LOG_2PI - 0.5 * z * z, axis=-1)
    return float(lp) if np.ndim(lp) == 0 else lp


def gaussian_log_prob_grad(d: GaussianDist, action):
    """(d logp/d mean, d logp/d log_std), elementwise."""
    action = np.asarray(action, dtype=np.float64)
    inv_var = np.exp(-2.0 * d.log_std)
    diff = action - d.mean
    return diff * inv_var, diff * diff * inv_var - 1.0


def gaussian_kl(p: GaussianDist, q: GaussianDist) -> np.ndarray | float:
    """KL(p || q) for diagonal Gaussians, summed over the last axis."""
    _check_same_dim(p.mean, q.mean, "gaussian_kl")
    var_p = np.exp(2.0 * p.log_std)
    var_q = np.exp(2.0 * q.log_std)
    diff = p.mean - q.mean
    kl = np.sum(q.log_std - p.log_std + (var_p + diff * diff) / (2.0 * var_q) - 0.5, axis=-1)
    return float(kl) if np.ndim(kl) == 0 else kl


def gaussian_kl_grad(p: GaussianDist, q: GaussianDist):
    """Gradient of KL(p || q) w.r.t. p's (mean, log_std), elementwise."""
    inv_var_q = np.exp(-2.0 * q.log_std)
    return (p.mean - q.mean) * inv_var_q, np.exp(2.0 * p.log_std) * inv_var_q - 1.0


class Adam:
    """Adam on a flat parameter vector. ``step`` descends the given gradient."""

    def __init__(self, size: int, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_by_norm(grad: np.ndarray, max_norm: float | None) -> np.ndarray:
    if not max_norm:
        return grad
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


# -- checkpoints -----------------------------------------------------------

def save_params(path, params: ParameterSet, spec: MlpSpec, seed: int | None = None,
                extra: dict | None = None) -> None:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.n_params,):
        raise ShapeError(f"expected {spec.n_params} parameters, got {params.shape}")
    header = {
        "spec": spec.to_dict(),
        "seed": seed,
        "layout": [[n_in, n_out] for n_in, n_out, _, _ in _layout(spec)],
        "count": spec.n_params,
    }
    if extra:
        header["extra"] = extra
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(params.astype("<f8").tobytes())


def load_params(path, spec: MlpSpec | None = None):
    """Return ``(params, spec, header)``; verifies the stored count and layout."""
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
        found = MlpSpec.from_dict(header["spec"])
        count = int(header["count"])
    except (ValueError, KeyError, TypeError, SpecError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header ({exc})") from exc
    if count != found.n_params:
        raise FormatError(f"{path}: header count {count} disagrees with spec size {found.n_params}")
    payload = data[nl + 1:]
    if len(payload) != 8 * count:
        raise FormatError(f"{path}: expected {8 * count} payload bytes, found {len(payload)}")
    if spec is not None and spec != found:
        raise FormatError(
            f"{path}: spec mismatch, expected {list(spec.layer_sizes)} ({spec.head}, "
            f"{spec.n_params} params), found {list(found.layer_sizes)} ({found.head}, {count} params)"
        )
    params = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return params, found, header
