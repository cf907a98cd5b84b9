"""Central-difference checks of every hand-written gradient in the package."""

from __future__ import annotations

import numpy as np

from . import nn
from .expert import MoeSpec, init_moe, moe_loss_and_grad
from .nn import GaussianDist, MlpSpec
from .ppo import GaussianPolicy, PpoConfig, ValueFunction, objective_and_grads

H = 1e-6


def central_diff(f, x: np.ndarray, h: float = H) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric) -> float:
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-10)
    return float(np.linalg.norm(a - n) / scale)


def _random_loss(rng, shape):
    w = rng.normal(size=shape)

    def fn(out):
        if isinstance(out, GaussianDist):
            wm, wl = w[..., : out.dim], w[..., out.dim:]
            loss = np.sum(wm * out.mean ** 2) + np.sum(wl * out.log_std)
            return float(loss), (2 * wm * out.mean, wl)
        return float(np.sum(w * out ** 2)), 2 * w * out

    return fn


def _mlp_case(rng, head: str):
    sizes = (int(rng.integers(2, 6)), int(rng.integers(2, 7)), int(rng.integers(2, 7)))
    out_dim = int(rng.integers(1, 4))
    if head == "gaussian":
        spec = MlpSpec(sizes + (2 * out_dim,), "gaussian")
    else:
        spec = MlpSpec(sizes + (out_dim + (1 if head == "softmax" else 0),), head)
    params = nn.init_params(spec, int(rng.integers(1 << 30))) + rng.normal(0, 0.3, spec.n_params)
    if head == "gaussian":
        # keep raw log-stds away from the clamp boundaries so the function is smooth
        _, b = nn.layers(params, spec)[-1]
        b[out_dim:] = rng.uniform(-1, 1, out_dim)
    x = rng.uniform(-1, 1, (int(rng.integers(1, 5)), spec.input_dim))
    loss_fn = _random_loss(rng, (x.shape[0], spec.output_dim))
    _, gp, gx = nn.value_and_grad(params, spec, x, loss_fn)
    num_p = central_diff(lambda p: loss_fn(nn.forward(p, spec, x))[0], params.copy())
    num_x = central_diff(lambda xx: loss_fn(nn.forward(params, spec, xx))[0], x.copy())
    return rel_error(gp, num_p), rel_error(gx, num_x)


def _gaussian_case(rng):
    d = int(rng.integers(1, 4))
    p = GaussianDist(rng.normal(size=d), rng.uniform(-1, 1, d))
    q = GaussianDist(rng.normal(size=d), rng.uniform(-1, 1, d))
    a = rng.normal(size=d)
    gm, gl = nn.gaussian_log_prob_grad(p, a)
    nm = central_diff(lambda m: nn.gaussian_log_prob(GaussianDist(m, p.log_std), a), p.mean.copy())
    nl = central_diff(lambda ls: nn.gaussian_log_prob(GaussianDist(p.mean, ls), a), p.log_std.copy())
    e_lp = rel_error(np.concatenate([gm, gl]), np.concatenate([nm, nl]))
    km, kl = nn.gaussian_kl_grad(p, q)
    nm = central_diff(lambda m: nn.gaussian_kl(GaussianDist(m, p.log_std), q), p.mean.copy())
    nl = central_diff(lambda ls: nn.gaussian_kl(GaussianDist(p.mean, ls), q), p.log_std.copy())
    e_kl = rel_error(np.concatenate([km, kl]), np.concatenate([nm, nl]))
    return e_lp, e_kl


def _ppo_case(rng):
    obs_dim, act_dim = int(rng.integers(2, 5)), int(rng.integers(1, 3))
    pol = GaussianPolicy.create(obs_dim, (5,), act_dim, int(rng.integers(1 << 30)))
    pol.params = pol.params + rng.normal(0, 0.2, pol.params.size)
    crit = ValueFunction.create(obs_dim, (5,), int(rng.integers(1 << 30)))
    B = 8
    states = rng.uniform(-1, 1, (B, obs_dim))
    actions = rng.normal(size=(B, act_dim))
    d = pol.dist(states)
    batch = {
        "states": states, "actions": actions,
        # old log-probs near the current ones so most ratios sit inside the clip range
        "log_probs": nn.gaussian_log_prob(d, actions) + rng.normal(0, 0.1, B),
        "advantages": rng.normal(size=B), "targets": rng.normal(size=B),
    }
    cfg = PpoConfig(entropy_coef=float(rng.uniform(0, 0.1)), minibatch_size=B, rollout_size=B)
    expert = GaussianDist(rng.normal(size=(B, act_dim)), rng.uniform(-0.5, 0.5, (B, act_dim)))
    beta = float(rng.uniform(0, 2))
    _, gp, gc, _ = objective_and_grads(pol, crit, batch, cfg, expert, beta)

    def obj_p(p):
        return objective_and_grads(GaussianPolicy(pol.spec, p), crit, batch, cfg, expert, beta)[0]

    def obj_c(c):
        return objective_and_grads(pol, ValueFunction(crit.spec, c), batch, cfg, expert, beta)[0]

    return rel_error(gp, central_diff(obj_p, pol.params.copy())), rel_error(gc, central_diff(obj_c, crit.params.copy()))


def _moe_case(rng):
    spec = MoeSpec(n_experts=int(rng.integers(1, 4)), input_dim=4, action_dim=2, expert_hidden=(5,),
                   router_hidden=(4,))
    params = init_moe(spec, int(rng.integers(1 << 20))) + rng.normal(0, 0.3, spec.n_params)
    s = rng.uniform(-1, 1, (6, 4))
    a = rng.normal(size=(6, 2))
    _, g = moe_loss_and_grad(params, spec, s, a)
    num = central_diff(lambda p: moe_loss_and_grad(p, spec, s, a)[0], params.copy())
    return rel_error(g, num)


def gradient_report(n_cases: int = 10, seed: int = 0) -> dict:
    """Relative errors per gradient family; each family gets ``n_cases`` random cases."""
    rng = np.random.default_rng(seed)
    out = {k: [] for k in ("mlp_params", "mlp_input", "log_prob", "kl", "ppo_policy", "ppo_critic",
                           "moe_nll")}
    for i in range(n_cases):
        ep, ex = _mlp_case(rng, ("linear", "gaussian", "softmax")[i % 3])
        out["mlp_params"].append(ep)
        out["mlp_input"].append(ex)
        e_lp, e_kl = _gaussian_case(rng)
        out["log_prob"].append(e_lp)
        out["kl"].append(e_kl)
        e_p, e_c = _ppo_case(rng)
        out["ppo_policy"].append(e_p)
        out["ppo_critic"].append(e_c)
        out["moe_nll"].append(_moe_case(rng))
    return out


def gradient_checks(n_cases: int = 10, seed: int = 0) -> float:
    rep = gradient_report(n_cases, seed)
    return max(max(v) for v in rep.values())
