"""Skill-conditioned soft actor-critic with a state-value network.

Networks (all ReLU MLPs):

* policy  pi(a | s, z): Gaussian over pre-squash actions u, a = a_max * tanh(u)
* Q1, Q2 (s, z, a):     twin soft Q functions
* V, V_bar (s, z):      state value and its Polyak-averaged target

Losses, with a~ = f(eps; s) drawn through the reparameterisation::

    J_V  = mean 1/2 (V(s) - (min Q(s, a~) - alpha log pi(a~|s)))^2
    J_Q  = mean 1/2 (Q_i(s, a) - (r + gamma V_bar(s')))^2        per Q_i
    J_pi = mean (alpha log pi(a~|s) - min Q(s, a~))

Gradients are written out by hand against :class:`safelab.approx.Mlp`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from safelab.approx import Mlp, Optimizer, split_gaussian

LOG_2PI = float(np.log(2 * np.pi))
SQUASH_EPS = 1e-6


@dataclass
class SacConfig:
    hidden: tuple[int, ...] = (64, 64, 64, 64, 64)
    gamma: float = 0.99
    tau: float = 0.005
    alpha: float = 0.1
    lr: float = 1e-3
    batch_size: int = 256
    buffer_size: int = 1_000_000
    start_steps: int = 1000  # uniform random actions before the first update
    reward_scale: float = 1.0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")


@dataclass
class PolicySample:
    actions: np.ndarray  # squashed, within +-a_max
    u: np.ndarray  # pre-squash
    eps: np.ndarray
    mean: np.ndarray
    logvar: np.ndarray
    logp: np.ndarray  # (n,)
    cache: dict


class SacAgent:
    def __init__(self, obs_dim: int, act_dim: int, a_max: float, cfg: SacConfig | None = None,
                 rng: np.random.Generator | None = None):
        self.cfg = cfg or SacConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.obs_dim, self.act_dim, self.a_max = obs_dim, act_dim, float(a_max)
        h = self.cfg.hidden
        self.policy = Mlp((obs_dim, *h, 2 * act_dim), "gaussian", rng=rng)
        self.q1 = Mlp((obs_dim + act_dim, *h, 1), rng=rng)
        self.q2 = Mlp((obs_dim + act_dim, *h, 1), rng=rng)
        self.v = Mlp((obs_dim, *h, 1), rng=rng)
        self.v_target = self.v.copy()
        lr = self.cfg.lr
        self.optimizers = {name: Optimizer(getattr(self, name), lr)
                           for name in ("policy", "q1", "q2", "v")}
        self.updates = 0

    def networks(self) -> dict[str, Mlp]:
        return {"policy": self.policy, "q1": self.q1, "q2": self.q2,
                "v": self.v, "v_target": self.v_target}

    # --- policy ----------------------------------------------------------------

    def sample(self, x, eps) -> PolicySample:
        out, cache = self.policy.forward(x)
        mean, logvar = split_gaussian(out)
        std = np.exp(0.5 * logvar)
        u = mean + std * eps
        t = np.tanh(u)
        logp = (np.sum(-0.5 * eps ** 2 - 0.5 * LOG_2PI - 0.5 * logvar, axis=-1)
                - np.sum(np.log(self.a_max * (1 - t ** 2) + SQUASH_EPS), axis=-1))
        return PolicySample(self.a_max * t, u, eps, mean, logvar, logp, cache)

    def act(self, x, rng: np.random.Generator | None = None, deterministic: bool = False):
        x = np.atleast_2d(x)
        if deterministic:
            mean, _ = split_gaussian(self.policy.predict(x))
            a = self.a_max * np.tanh(mean)
        else:
            a = self.sample(x, rng.standard_normal((len(x), self.act_dim))).actions
        return a[0] if a.shape[0] == 1 else a

    def q_min(self, x, a) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        xa = np.concatenate([x, a], axis=-1)
        q1 = self.q1.predict(xa)[:, 0]
        q2 = self.q2.predict(xa)[:, 0]
        return np.minimum(q1, q2), q1, q2

    # --- targets -------------------------------------------------------------------

    def polyak(self) -> None:
        tau = self.cfg.tau
        for dst, src in zip(self.v_target.params, self.v.params):
            dst *= 1.0 - tau
            dst += tau * src


# --- losses -------------------------------------------------------------------------------

def sac_value_loss(agent: SacAgent, x, eps) -> tuple[float, list[np.ndarray]]:
    """J_V and its gradient with respect to the value network."""
    ps = agent.sample(x, eps)
    qmin, _, _ = agent.q_min(x, ps.actions)
    target = qmin - agent.cfg.alpha * ps.logp
    out, cache = agent.v.forward(x)
    err = out[:, 0] - target
    n = len(err)
    grads, _ = agent.v.backward(cache, (err / n)[:, None])
    return float(0.5 * np.mean(err ** 2)), grads


def sac_q_targets(agent: SacAgent, rewards, x_next, terminal, terminal_values=None):
    """r + gamma * V_bar(s'); ``terminal`` rows bootstrap ``terminal_values`` (0 by default)."""
    rewards = np.asarray(rewards, float)
    boot = agent.v_target.predict(x_next)[:, 0]
    term = np.zeros_like(rewards) if terminal_values is None else np.asarray(terminal_values, float)
    return rewards + agent.cfg.gamma * np.where(np.asarray(terminal, bool), term, boot)


def sac_q_loss(agent: SacAgent, x, actions, rewards, x_next, terminal, terminal_values=None
               ) -> tuple[float, tuple[list[np.ndarray], list[np.ndarray]]]:
    """Sum of J_Q over both Q networks; returns per-network gradients."""
    y = sac_q_targets(agent, rewards, x_next, terminal, terminal_values)
    xa = np.concatenate([x, actions], axis=-1)
    total, all_grads = 0.0, []
    for net in (agent.q1, agent.q2):
        out, cache = net.forward(xa)
        err = out[:, 0] - y
        grads, _ = net.backward(cache, (err / len(err))[:, None])
        total += float(0.5 * np.mean(err ** 2))
        all_grads.append(grads)
    return total, (all_grads[0], all_grads[1])


def sac_policy_loss(agent: SacAgent, x, eps) -> tuple[float, list[np.ndarray]]:
    """J_pi and its gradient through the reparameterised, squashed action."""
    alpha, a_max = agent.cfg.alpha, agent.a_max
    ps = agent.sample(x, eps)
    xa = np.concatenate([x, ps.actions], axis=-1)
    out1, c1 = agent.q1.forward(xa)
    out2, c2 = agent.q2.forward(xa)
    q1, q2 = out1[:, 0], out2[:, 0]
    use1 = q1 <= q2
    n = len(q1)
    loss = float(np.mean(alpha * ps.logp - np.minimum(q1, q2)))

    # dQmin/da through whichever critic is smaller for each row
    _, gx1 = agent.q1.backward(c1, np.where(use1, 1.0, 0.0)[:, None])
    _, gx2 = agent.q2.backward(c2, np.where(use1, 0.0, 1.0)[:, None])
    dq_da = (gx1 + gx2)[:, agent.obs_dim:]

    t = np.tanh(ps.u)
    dsq = 1.0 - t ** 2
    d_logp_du = 2.0 * a_max * t * dsq / (a_max * dsq + SQUASH_EPS)
    d_du = (alpha * d_logp_du - dq_da * a_max * dsq) / n
    d_mean = d_du
    d_logvar = d_du * ps.eps * 0.5 * np.exp(0.5 * ps.logvar) - 0.5 * alpha / n
    grads, _ = agent.policy.backward(ps.cache, np.concatenate([d_mean, d_logvar], axis=-1))
    return loss, grads


def sac_update(agent: SacAgent, x, actions, rewards, x_next, terminal, rng: np.random.Generator,
               terminal_values=None) -> dict[str, float]:
    """One gradient step on V, both Qs and the policy, then a Polyak step."""
    n, a_dim = len(x), agent.act_dim
    lq, (g1, g2) = sac_q_loss(agent, x, actions, rewards, x_next, terminal, terminal_values)
    lv, gv = sac_value_loss(agent, x, rng.standard_normal((n, a_dim)))
    lp, gp = sac_policy_loss(agent, x, rng.standard_normal((n, a_dim)))
    agent.optimizers["q1"].step(g1)
    agent.optimizers["q2"].step(g2)
    agent.optimizers["v"].step(gv)
    agent.optimizers["policy"].step(gp)
    agent.polyak()
    agent.updates += 1
    return {"q": lq, "v": lv, "policy": lp}
