"""Learned models for safe-set MPC and their training.

* dynamics: probabilistic ensemble predicting the state change, Gaussian NLL
* value: ensemble regressed on discounted cost-to-go offline, TD(1) online
  against a lagged target copy
* safe set: sigmoid classifier trained toward max(success, gamma_S * f_S(next))
* constraint / goal: balanced binary classifiers

Every network sees standardised inputs; the statistics live in the bundle.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from safelab import approx
from safelab.approx import Ensemble, Mlp, Optimizer, split_gaussian
from safelab.dataset import Batch, Dataset, atomic_write_text
from safelab.env import EpisodeRecord

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2 * np.pi))


class TrainingRefused(ValueError):
    """Training cannot proceed on this data (empty set, missing positives)."""


@dataclass
class ModelConfig:
    dyn_members: int = 5
    dyn_hidden: tuple[int, ...] = (128, 128)
    value_members: int = 3
    value_hidden: tuple[int, ...] = (256, 256, 256)
    classifier_hidden: tuple[int, ...] = (256, 256, 256)
    gamma: float = 0.99
    safe_gamma: float = 0.3
    batch_size: int = 256
    lr: float = 1e-3
    dyn_epochs: int = 50
    value_epochs: int = 50
    safe_epochs: int = 50
    classifier_epochs: int = 30
    target_sync: int = 100
    online_steps: int = 200
    horizon: int = 100

    def __post_init__(self):
        self.dyn_hidden = tuple(self.dyn_hidden)
        self.value_hidden = tuple(self.value_hidden)
        self.classifier_hidden = tuple(self.classifier_hidden)
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 <= self.safe_gamma <= 1:
            raise ValueError("safe_gamma must lie in [0, 1]")


# --- losses ------------------------------------------------------------------------

def gaussian_nll(mean, logvar, target) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean (over rows) Gaussian negative log-likelihood, summed over dims.

    Returns (loss, dL/dmean, dL/dlogvar).
    """
    n = mean.shape[0]
    inv_var = np.exp(-logvar)
    err = mean - target
    loss = 0.5 * np.sum(LOG_2PI + logvar + err ** 2 * inv_var) / n
    return float(loss), err * inv_var / n, 0.5 * (1.0 - err ** 2 * inv_var) / n


def dyn_loss(net: Mlp, inputs, target_delta) -> tuple[float, list[np.ndarray]]:
    out, cache = net.forward(inputs)
    mean, logvar = split_gaussian(out)
    loss, g_mean, g_logvar = gaussian_nll(mean, logvar, target_delta)
    grads, _ = net.backward(cache, np.concatenate([g_mean, g_logvar], axis=-1))
    return loss, grads


def squared_loss(net: Mlp, inputs, target) -> tuple[float, list[np.ndarray]]:
    out, cache = net.forward(inputs)
    err = out[:, 0] - np.asarray(target, dtype=float)
    n = len(err)
    grads, _ = net.backward(cache, (2.0 * err / n)[:, None])
    return float(np.mean(err ** 2)), grads


def value_online_td_loss(net: Mlp, target_net: Mlp, states, rewards, next_states,
                         dones, gamma: float, terminal_values=None
                         ) -> tuple[float, list[np.ndarray]]:
    """Mean squared TD(1) error against the lagged target network.

    Terminal transitions bootstrap ``terminal_values`` (zeros by default)
    instead of the target network.
    """
    rewards = np.asarray(rewards, float)
    dones = np.asarray(dones, bool)
    boot = target_net.predict(next_states)[:, 0]
    term = np.zeros_like(rewards) if terminal_values is None else np.asarray(terminal_values, float)
    y = rewards + gamma * np.where(dones, term, boot)
    return squared_loss(net, states, y)


def bce_logits_loss(net: Mlp, inputs, target) -> tuple[float, list[np.ndarray]]:
    """Binary cross-entropy (soft targets allowed) on a sigmoid-head network."""
    _, cache = net.forward(inputs)
    z = cache["logits"][:, 0]
    y = np.asarray(target, dtype=float)
    n = len(y)
    # log(1 + e^z) - y z  ==  -y log p - (1 - y) log(1 - p)
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    p = approx.sigmoid(z)
    grads, _ = net.backward_logits(cache, ((p - y) / n)[:, None])
    return loss, grads


def cross_entropy_loss(net: Mlp, inputs, labels) -> tuple[float, list[np.ndarray]]:
    """Categorical cross-entropy for a softmax-head network."""
    _, cache = net.forward(inputs)
    z = cache["logits"]
    labels = np.asarray(labels, dtype=int)
    logp = approx.log_softmax(z)
    n = len(labels)
    loss = float(-np.mean(logp[np.arange(n), labels]))
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    grads, _ = net.backward_logits(cache, g / n)
    return loss, grads


# --- targets ----------------------------------------------------------------------------

def _extended_rewards(ep: EpisodeRecord, horizon: int | None) -> np.ndarray:
    r = ep.rewards
    if horizon is None or len(r) >= horizon or not ep.dones[-1]:
        return r
    # goal and violation are absorbing: the final reward repeats to the horizon
    return np.concatenate([r, np.full(horizon - len(r), r[-1])])


def value_offline_target(ep: EpisodeRecord, t: int, gamma: float,
                         horizon: int | None = None) -> float:
    """Discounted cost-to-go sum_{i>=1} gamma^i r_{t+i} from state index ``t``.

    ``t`` ranges over 0..len(ep) where ``t == len(ep)`` is the final state.
    With ``horizon`` set, terminated episodes are padded with their absorbing
    reward up to the horizon.
    """
    if not 0 <= t <= len(ep):
        raise IndexError(t)
    r = _extended_rewards(ep, horizon)
    future = r[t + 1:]
    return float(np.sum(gamma ** np.arange(1, len(future) + 1) * future))


def value_offline_targets(ep: EpisodeRecord, gamma: float, horizon: int | None = None
                          ) -> np.ndarray:
    """Targets for every state index 0..len(ep) (the final state included)."""
    r = _extended_rewards(ep, horizon)
    out = np.zeros(max(len(r), len(ep) + 1))
    # G_t = gamma * (r_{t+1} + G_{t+1})
    for t in range(len(r) - 2, -1, -1):
        out[t] = gamma * (r[t + 1] + out[t + 1])
    out = out[:len(ep) + 1]
    assert np.all(out <= 0.0), "cost-to-go must be non-positive under the sparse reward"
    return out


def absorbing_terminal_values(batch: Batch, gamma: float, horizon: int) -> np.ndarray:
    """Bootstrap values for terminal next-states: 0 at the goal or the horizon,
    the discounted absorbing penalty after a violation."""
    g = gamma
    remaining = np.maximum(horizon - 1 - (batch.step + 1), 0)
    penalty = -g * (1 - g ** remaining) / (1 - g)
    return np.where(batch.constraints, penalty, 0.0)


def safe_set_target(success, gamma_s: float, successor_value, terminal=False):
    """max(success, gamma_S * f_S(next)); terminal successors count as 0."""
    succ = np.where(np.asarray(terminal, bool), 0.0, np.asarray(successor_value, float))
    out = np.maximum(np.asarray(success, float), gamma_s * succ)
    return float(out) if np.ndim(out) == 0 else out


# --- normalisation ----------------------------------------------------------------------

@dataclass
class Normalizer:
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    delta_mean: np.ndarray
    delta_std: np.ndarray

    @classmethod
    def fit(cls, ds: Dataset) -> "Normalizer":
        b = ds.flatten()
        states = ds.all_states()
        delta = b.next_states - b.states

        def stats(x):
            return x.mean(axis=0), np.maximum(x.std(axis=0), 1e-6)

        return cls(*stats(states), *stats(b.actions), *stats(delta))

    def s(self, states):
        return (np.asarray(states) - self.state_mean) / self.state_std

    def sa(self, states, actions):
        return np.concatenate([self.s(states),
                               (np.asarray(actions) - self.action_mean) / self.action_std],
                              axis=-1)

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})


# --- the bundle ----------------------------------------------------------------------------

@dataclass
class ModelBundle:
    dyn: Ensemble
    value: Ensemble
    value_target: Ensemble
    safe: Mlp
    constraint: Mlp
    goal: Mlp
    norm: Normalizer
    value_scale: float
    config: ModelConfig = field(default_factory=ModelConfig)
    optimizers: dict = field(default_factory=dict, repr=False)
    td_steps: int = 0

    # evaluation on raw states --------------------------------------------------
    def value_fn(self, states) -> np.ndarray:
        x = self.norm.s(states)
        return self.value.predict_mean(x)[:, 0] * self.value_scale

    def safe_fn(self, states) -> np.ndarray:
        return self.safe.predict(self.norm.s(states))[:, 0]

    def constraint_fn(self, states) -> np.ndarray:
        return self.constraint.predict(self.norm.s(states))[:, 0]

    def goal_fn(self, states) -> np.ndarray:
        return self.goal.predict(self.norm.s(states))[:, 0]

    def dyn_member(self, m: int, states, actions) -> tuple[np.ndarray, np.ndarray]:
        """Raw-unit (mean, variance) of the next state under ensemble member ``m``."""
        out = self.dyn[m].predict(self.norm.sa(states, actions))
        mean, logvar = split_gaussian(out)
        return (states + mean * self.norm.delta_std + self.norm.delta_mean,
                np.exp(logvar) * self.norm.delta_std ** 2)

    def sync_value_target(self) -> None:
        for dst, src in zip(self.value_target.members, self.value.members):
            dst.load_params(src)

    def networks(self) -> dict[str, list[Mlp]]:
        return {"dynamics": self.dyn.members, "value": self.value.members,
                "value_target": self.value_target.members, "safe_set": [self.safe],
                "constraint": [self.constraint], "goal": [self.goal]}


def ts1_rollout(bundle_or_dyn, s0, actions, n_particles: int, rng: np.random.Generator,
                norm: Normalizer | None = None) -> np.ndarray:
    """TS-1 particle propagation.

    ``actions`` has shape (H, a) for one sequence or (N, H, a) for a batch.
    Every particle draws a fresh ensemble member uniformly at each step and
    samples the next state from that member's Gaussian. Returns
    (n_particles, H+1, d) or (N, n_particles, H+1, d).
    """
    bundle = bundle_or_dyn
    actions = np.asarray(actions, dtype=float)
    single = actions.ndim == 2
    if single:
        actions = actions[None]
    n_cand, horizon, _ = actions.shape
    s0 = np.asarray(s0, dtype=float)
    d = s0.shape[-1]
    n_rows = n_cand * n_particles
    traj = np.empty((n_rows, horizon + 1, d))
    traj[:, 0] = s0
    act = np.repeat(actions, n_particles, axis=0)  # rows grouped by candidate
    n_members = len(bundle.dyn)
    for t in range(horizon):
        s = traj[:, t]
        choice = rng.integers(n_members, size=n_rows)
        noise = rng.standard_normal((n_rows, d))
        nxt = np.empty_like(s)
        for m in range(n_members):
            rows = np.flatnonzero(choice == m)
            if rows.size == 0:
                continue
            mean, var = bundle.dyn_member(m, s[rows], act[rows, t])
            nxt[rows] = mean + np.sqrt(var) * noise[rows]
        traj[:, t + 1] = nxt
    traj = traj.reshape(n_cand, n_particles, horizon + 1, d)
    return traj[0] if single else traj


# --- training -----------------------------------------------------------------------------

def _widths(in_dim, hidden, out_dim):
    return (in_dim, *hidden, out_dim)


def build_bundle(ds: Dataset, cfg: ModelConfig, rng: np.random.Generator) -> ModelBundle:
    norm = Normalizer.fit(ds)
    dyn = Ensemble(cfg.dyn_members, _widths(4, cfg.dyn_hidden, 4), "gaussian", rng=rng)
    value = Ensemble(cfg.value_members, _widths(2, cfg.value_hidden, 1), "linear", rng=rng)
    classifier = _widths(2, cfg.classifier_hidden, 1)
    scale = float(np.sum(cfg.gamma ** np.arange(1, cfg.horizon + 1)))
    bundle = ModelBundle(
        dyn=dyn, value=value, value_target=value.copy(),
        safe=Mlp(classifier, "sigmoid", rng=rng),
        constraint=Mlp(classifier, "sigmoid", rng=rng),
        goal=Mlp(classifier, "sigmoid", rng=rng),
        norm=norm, value_scale=scale, config=cfg)
    opt = {}
    for i, m in enumerate(dyn.members):
        opt[f"dyn{i}"] = Optimizer(m, cfg.lr)
    for i, m in enumerate(value.members):
        opt[f"value{i}"] = Optimizer(m, cfg.lr)
    for name in ("safe", "constraint", "goal"):
        opt[name] = Optimizer(getattr(bundle, name), cfg.lr)
    bundle.optimizers = opt
    return bundle


def _n_batches(n_rows: int, batch_size: int, epochs: int) -> int:
    return epochs * max(1, -(-n_rows // batch_size))


def train_dynamics(bundle: ModelBundle, batch: Batch, steps: int,
                   rng: np.random.Generator) -> list[float]:
    cfg = bundle.config
    x = bundle.norm.sa(batch.states, batch.actions)
    y = ((batch.next_states - batch.states) - bundle.norm.delta_mean) / bundle.norm.delta_std
    losses = []
    for _ in range(steps):
        step_losses = []
        for i, member in enumerate(bundle.dyn.members):
            idx = rng.integers(len(x), size=cfg.batch_size)  # independent per member
            loss, grads = dyn_loss(member, x[idx], y[idx])
            bundle.optimizers[f"dyn{i}"].step(grads)
            step_losses.append(loss)
        losses.append(float(np.mean(step_losses)))
    return losses


def _value_rows(ds: Dataset, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    states, targets = [], []
    for ep in ds.episodes:
        states.append(np.vstack([ep.states, ep.next_states[-1:]]))
        targets.append(value_offline_targets(ep, cfg.gamma, cfg.horizon))
    return np.concatenate(states), np.concatenate(targets)


def train_value_offline(bundle: ModelBundle, ds: Dataset, steps: int,
                        rng: np.random.Generator) -> list[float]:
    cfg = bundle.config
    states, targets = _value_rows(ds, cfg)
    x = bundle.norm.s(states)
    y = targets / bundle.value_scale
    losses = []
    for _ in range(steps):
        step_losses = []
        for i, member in enumerate(bundle.value.members):
            idx = rng.integers(len(x), size=cfg.batch_size)
            loss, grads = squared_loss(member, x[idx], y[idx])
            bundle.optimizers[f"value{i}"].step(grads)
            step_losses.append(loss)
        losses.append(float(np.mean(step_losses)))
    bundle.sync_value_target()
    return losses


def train_value_td(bundle: ModelBundle, batch: Batch, steps: int,
                   rng: np.random.Generator) -> list[float]:
    cfg = bundle.config
    x = bundle.norm.s(batch.states)
    x_next = bundle.norm.s(batch.next_states)
    scale = bundle.value_scale
    r = batch.rewards / scale
    term = absorbing_terminal_values(batch, cfg.gamma, cfg.horizon) / scale
    losses = []
    for _ in range(steps):
        step_losses = []
        for i, (member, target) in enumerate(zip(bundle.value.members,
                                                 bundle.value_target.members)):
            idx = rng.integers(len(x), size=cfg.batch_size)
            loss, grads = value_online_td_loss(member, target, x[idx], r[idx], x_next[idx],
                                               batch.dones[idx], cfg.gamma, term[idx])
            bundle.optimizers[f"value{i}"].step(grads)
            step_losses.append(loss)
        bundle.td_steps += 1
        if bundle.td_steps % cfg.target_sync == 0:
            bundle.sync_value_target()
        losses.append(float(np.mean(step_losses)))
    return losses


def _safe_rows(ds: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(states, success, successor index or -1, terminal) for every visited state."""
    states, success, succ, terminal = [], [], [], []
    offset = 0
    for ep in ds.episodes:
        n = len(ep)
        states.append(np.vstack([ep.states, ep.next_states[-1:]]))
        success.append(np.full(n + 1, float(ep.reached_goal)))
        nxt = offset + np.arange(1, n + 2)
        nxt[-1] = -1
        succ.append(nxt)
        term = np.zeros(n + 1, bool)
        term[n - 1:] = ep.dones[-1]
        term[n] = True
        terminal.append(term)
        offset += n + 1
    return (np.concatenate(states), np.concatenate(success),
            np.concatenate(succ), np.concatenate(terminal))


def train_safe_set(bundle: ModelBundle, ds: Dataset, steps: int, rng: np.random.Generator,
                   refresh_every: int | None = None) -> list[float]:
    """BCE toward the bootstrapped safe-set target, refreshed every ``refresh_every``
    steps (one epoch by default) from the current network."""
    cfg = bundle.config
    states, success, succ, terminal = _safe_rows(ds)
    x = bundle.norm.s(states)
    refresh = refresh_every or max(1, -(-len(x) // cfg.batch_size))
    losses = []
    target = None
    for k in range(steps):
        if k % refresh == 0:
            f_next = bundle.safe.predict(x)[:, 0]
            successor = np.where(succ >= 0, f_next[np.maximum(succ, 0)], 0.0)
            target = safe_set_target(success, cfg.safe_gamma, successor, terminal)
        idx = rng.integers(len(x), size=cfg.batch_size)
        loss, grads = bce_logits_loss(bundle.safe, x[idx], target[idx])
        bundle.optimizers["safe"].step(grads)
        losses.append(loss)
    return losses


def classifier_rows(ds: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(states, constraint label, goal label) over every visited state."""
    states, c, g = [], [], []
    for ep in ds.episodes:
        states.append(np.vstack([ep.states, ep.next_states[-1:]]))
        c.append(np.concatenate([np.zeros(len(ep), bool), ep.constraints[-1:]]))
        g.append(np.concatenate([np.zeros(len(ep), bool), ep.rewards[-1:] == 0.0]))
    return np.concatenate(states), np.concatenate(c), np.concatenate(g)


def train_balanced(net: Mlp, opt: Optimizer, x: np.ndarray, labels: np.ndarray,
                   steps: int, batch_size: int, rng: np.random.Generator,
                   name: str = "classifier") -> list[float]:
    pos = np.flatnonzero(labels)
    neg = np.flatnonzero(~labels)
    if pos.size == 0 or neg.size == 0:
        raise TrainingRefused(f"{name}: need both positive and negative examples "
                              f"(have {pos.size} positive, {neg.size} negative)")
    half = batch_size // 2
    y = np.concatenate([np.ones(half), np.zeros(batch_size - half)])
    losses = []
    for _ in range(steps):
        idx = np.concatenate([rng.choice(pos, half), rng.choice(neg, batch_size - half)])
        loss, grads = bce_logits_loss(net, x[idx], y)
        opt.step(grads)
        losses.append(loss)
    return losses


def fit_classifiers(bundle: ModelBundle, ds: Dataset, steps: int,
                    rng: np.random.Generator) -> dict[str, list[float]]:
    states, c_lab, g_lab = classifier_rows(ds)
    x = bundle.norm.s(states)
    bs = bundle.config.batch_size
    return {
        "constraint": train_balanced(bundle.constraint, bundle.optimizers["constraint"],
                                     x, c_lab, steps, bs, rng, "constraint estimator"),
        "goal": train_balanced(bundle.goal, bundle.optimizers["goal"],
                               x, g_lab, steps, bs, rng, "goal indicator"),
    }


def train_offline(ds: Dataset, cfg: ModelConfig, rng: np.random.Generator
                  ) -> tuple[ModelBundle, dict[str, list[float]]]:
    """Fit all five models on the offline dataset. Returns (bundle, loss curves)."""
    if len(ds) == 0:
        raise TrainingRefused("empty dataset")
    if not ds.gr and not any(ep.reached_goal for ep in ds.episodes):
        raise TrainingRefused("no goal-reaching episodes (D_gr partition is empty)")
    if not any(ep.violated for ep in ds.episodes):
        raise TrainingRefused("no constraint-violating episodes (D_constr has no violations)")
    bundle = build_bundle(ds, cfg, rng)
    batch = ds.flatten()
    n_states = len(batch) + len(ds)
    curves = {
        "dynamics": train_dynamics(bundle, batch,
                                   _n_batches(len(batch), cfg.batch_size, cfg.dyn_epochs), rng),
        "value": train_value_offline(bundle, ds,
                                     _n_batches(n_states, cfg.batch_size, cfg.value_epochs), rng),
        "safe_set": train_safe_set(bundle, ds,
                                   _n_batches(n_states, cfg.batch_size, cfg.safe_epochs), rng),
    }
    curves.update(fit_classifiers(
        bundle, ds, _n_batches(n_states, cfg.batch_size, cfg.classifier_epochs), rng))
    return bundle, curves


def update_online(bundle: ModelBundle, ds: Dataset, rng: np.random.Generator,
                  steps: int | None = None) -> dict[str, list[float]]:
    """Fine-tune every model on the current store (TD targets for the value)."""
    steps = bundle.config.online_steps if steps is None else steps
    batch = ds.flatten()
    curves = {
        "dynamics": train_dynamics(bundle, batch, steps, rng),
        "value": train_value_td(bundle, batch, steps, rng),
        "safe_set": train_safe_set(bundle, ds, steps, rng, refresh_every=steps),
    }
    curves.update(fit_classifiers(bundle, ds, steps, rng))
    return curves


# --- checkpoints -----------------------------------------------------------------------------

def save_bundle(bundle: ModelBundle, directory: str | Path, config_hash: str = "") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, nets in bundle.networks().items():
        approx.save_nets(directory / f"{name}.npn", nets, {"config_hash": config_hash})
    manifest = {
        "config_hash": config_hash,
        "normalizer": bundle.norm.to_dict(),
        "value_scale": bundle.value_scale,
        "td_steps": bundle.td_steps,
        "model_config": asdict(bundle.config),
    }
    atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=1))


def load_bundle(directory: str | Path) -> tuple[ModelBundle, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    nets = {name: approx.load_nets(directory / f"{name}.npn")[0]
            for name in ("dynamics", "value", "value_target", "safe_set",
                         "constraint", "goal")}

    def ens(members):
        e = Ensemble.__new__(Ensemble)
        e.members = members
        return e

    cfg = ModelConfig(**manifest["model_config"])
    bundle = ModelBundle(
        dyn=ens(nets["dynamics"]), value=ens(nets["value"]),
        value_target=ens(nets["value_target"]), safe=nets["safe_set"][0],
        constraint=nets["constraint"][0], goal=nets["goal"][0],
        norm=Normalizer.from_dict(manifest["normalizer"]),
        value_scale=manifest["value_scale"], config=cfg, td_steps=manifest["td_steps"])
    opt = {f"dyn{i}": Optimizer(m, cfg.lr) for i, m in enumerate(bundle.dyn.members)}
    opt.update({f"value{i}": Optimizer(m, cfg.lr) for i, m in enumerate(bundle.value.members)})
    for name in ("safe", "constraint", "goal"):
        opt[name] = Optimizer(getattr(bundle, name), cfg.lr)
    bundle.optimizers = opt
    return bundle, manifest
