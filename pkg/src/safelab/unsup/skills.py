"""Skill discovery with SMM/DIAYN rewards and dataset collection from skills.

Pretraining samples a skill per episode, rolls out the skill-conditioned SAC
policy and rewards it with

    r = log p*(s') - c_state log rho_z(s') + c_disc log q(z|s') - c_prior log p(z)

where log p*(s) = -||s - s_g|| + goal bonus - constraint penalty pulls the
state marginal toward the goal. Goal-reaching skills are then picked by
their extrinsic return and used to collect D_gr; D_constr comes from
uniform free-space starts, keeping only violating trajectories.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from safelab import approx, seeding
from safelab.dataset import Dataset, atomic_write_text
from safelab.env import (EnvConfig, EpisodeRecord, PointEnv, absorbed_return, in_constraint,
                         in_goal, sample_free_state)
from safelab.models import cross_entropy_loss
from safelab.unsup.density import NotFittedError, make_density
from safelab.unsup.sac import SacAgent, SacConfig, sac_update

log = logging.getLogger(__name__)


class CollectionError(RuntimeError):
    """Skill selection or dataset collection could not proceed."""


@dataclass
class SmmConfig:
    n_skills: int = 4
    c_state: float = 0.1  # H(S|Z): weight on -log rho_z(s)
    c_prior: float = 0.1  # H(Z): weight on -log p(z)
    c_disc: float = 0.1  # H(Z|S): weight on log q(z|s)
    goal_bonus: float = 10.0
    constraint_penalty: float = 50.0
    use_density: bool = True  # False gives the DIAYN reward plus log p*
    density: str = "kde"
    density_window: int = 10_000
    density_refit: int = 1000
    disc_hidden: tuple[int, ...] = (64, 64)
    disc_lr: float = 1e-3
    r_min: float = -90.0
    n_pretrain_steps: int = 500_000
    n_samples: int = 40
    n_dataset: int = 100
    max_attempts_factor: int = 20

    def __post_init__(self):
        self.disc_hidden = tuple(self.disc_hidden)
        if self.n_skills < 1:
            raise ValueError("n_skills must be >= 1")
        for name in ("c_state", "c_prior", "c_disc"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


class SkillPrior:
    """Uniform categorical over ``n_skills`` with one-hot encoding."""

    def __init__(self, n_skills: int):
        if n_skills < 1:
            raise ValueError("n_skills must be >= 1")
        self.n_skills = n_skills
        self.probs = np.full(n_skills, 1.0 / n_skills)

    def log_p(self, z) -> np.ndarray | float:
        out = np.log(self.probs[np.asarray(z, dtype=int)])
        return float(out) if np.ndim(out) == 0 else out

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.choice(self.n_skills, p=self.probs))

    def one_hot(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=int)
        if np.any((z < 0) | (z >= self.n_skills)):
            raise ValueError(f"skill index out of range: {z}")
        return np.eye(self.n_skills)[z]


class Discriminator:
    """Softmax classifier q(z|s) over standardised states."""

    def __init__(self, n_skills: int, center, scale, hidden=(64, 64), lr: float = 1e-3,
                 rng: np.random.Generator | None = None):
        self.center = np.asarray(center, float)
        self.scale = np.asarray(scale, float)
        self.net = approx.Mlp((2, *hidden, n_skills), "softmax", rng=rng)
        self.opt = approx.Optimizer(self.net, lr)

    def _x(self, states):
        return (np.atleast_2d(states) - self.center) / self.scale

    def probs(self, states) -> np.ndarray:
        return self.net.predict(self._x(states))

    def log_q(self, states, z) -> np.ndarray:
        _, cache = self.net.forward(self._x(states))
        logp = approx.log_softmax(cache["logits"])
        z = np.broadcast_to(np.asarray(z, dtype=int), (len(logp),))
        return logp[np.arange(len(logp)), z]

    def update(self, states, z) -> float:
        loss, grads = cross_entropy_loss(self.net, self._x(states), z)
        self.opt.step(grads)
        return loss

    def accuracy(self, states, z) -> float:
        return float(np.mean(np.argmax(self.probs(states), axis=1) == np.asarray(z)))


# --- rewards ----------------------------------------------------------------------------

def diayn_reward(states, z, disc: Discriminator, prior: SkillPrior):
    """log q(z|s) - log p(z)."""
    out = disc.log_q(states, z) - prior.log_p(z)
    return float(out[0]) if np.ndim(states) == 1 else out


def log_p_star(states, env: EnvConfig, cfg: SmmConfig):
    """-||s - s_g|| plus the goal bonus inside the goal ball and minus the
    constraint penalty inside the constraint region."""
    s = np.atleast_2d(np.asarray(states, dtype=float))
    out = -np.linalg.norm(s - np.asarray(env.goal), axis=1)
    out = out + cfg.goal_bonus * np.asarray(in_goal(env, s), float)
    out = out - cfg.constraint_penalty * np.asarray(in_constraint(env, s), float)
    return float(out[0]) if np.ndim(states) == 1 else out


def smm_reward(states, z, disc: Discriminator, density, prior: SkillPrior, env: EnvConfig,
               cfg: SmmConfig, log_rho=None):
    """Full SMM reward. ``log_rho`` may carry precomputed density values;
    otherwise ``density`` is queried (and must be fitted for skill ``z``)."""
    single = np.ndim(states) == 1
    s = np.atleast_2d(states)
    r = np.asarray(log_p_star(s, env, cfg), float).reshape(-1)
    if cfg.c_state:
        if log_rho is None:
            zs = np.broadcast_to(np.asarray(z, int), (len(s),))
            log_rho = np.empty(len(s))
            for k in np.unique(zs):
                if not density.fitted(int(k)):
                    raise NotFittedError(f"density for skill {k} has not been fitted")
                rows = zs == k
                log_rho[rows] = density.log_density(int(k), s[rows])
        r = r - cfg.c_state * np.asarray(log_rho, float)
    if cfg.c_disc:
        r = r + cfg.c_disc * disc.log_q(s, z)
    r = r - cfg.c_prior * np.asarray(prior.log_p(z), float)
    return float(r[0]) if single else r


# --- replay ------------------------------------------------------------------------------

class SkillReplay:
    """Fixed-capacity ring buffer of skill-tagged transitions."""

    FIELDS = ("s", "a", "s_next", "z", "goal", "violated", "timeout", "log_rho")

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.s = np.zeros((capacity, 2))
        self.a = np.zeros((capacity, 2))
        self.s_next = np.zeros((capacity, 2))
        self.z = np.zeros(capacity, int)
        self.goal = np.zeros(capacity, bool)
        self.violated = np.zeros(capacity, bool)
        self.timeout = np.zeros(capacity, bool)
        self.log_rho = np.zeros(capacity)
        self.size = 0
        self.ptr = 0

    def __len__(self) -> int:
        return self.size

    def add(self, **row) -> None:
        i = self.ptr
        for k in self.FIELDS:
            getattr(self, k)[i] = row[k]
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        idx = rng.integers(self.size, size=n)
        return {k: getattr(self, k)[idx] for k in self.FIELDS}


# --- training ----------------------------------------------------------------------------

@dataclass
class SkillLearner:
    """Everything pretraining produces and the later phases consume."""

    env: EnvConfig
    cfg: SmmConfig
    sac_cfg: SacConfig
    prior: SkillPrior
    agent: SacAgent
    disc: Discriminator
    density: object
    center: np.ndarray
    scale: np.ndarray
    steps: int = 0
    episodes: int = 0
    history: list[dict] = field(default_factory=list)

    def obs(self, s, z) -> np.ndarray:
        s = np.atleast_2d(s)
        zs = np.broadcast_to(np.asarray(z, int), (len(s),))
        return np.concatenate([(s - self.center) / self.scale, self.prior.one_hot(zs)], axis=1)


def make_learner(env: EnvConfig, cfg: SmmConfig | None = None,
                 sac_cfg: SacConfig | None = None, seed: int = 0) -> SkillLearner:
    cfg = cfg or SmmConfig()
    sac_cfg = sac_cfg or SacConfig()
    center = np.asarray(env.arena) / 2.0
    scale = np.asarray(env.arena) / 2.0
    prior = SkillPrior(cfg.n_skills)
    agent = SacAgent(2 + cfg.n_skills, 2, env.a_max, sac_cfg, seeding.rng(seed, "sac-init"))
    disc = Discriminator(cfg.n_skills, center, scale, cfg.disc_hidden, cfg.disc_lr,
                         seeding.rng(seed, "disc-init"))
    density = make_density(cfg.density, cfg.n_skills, center, scale, cfg.density_window,
                           seed=seeding.child_seed(seed, "density"))
    return SkillLearner(env, cfg, sac_cfg, prior, agent, disc, density, center, scale)


def _terminal_values(learner: SkillLearner, rewards, goal, violated) -> np.ndarray:
    """Goal and violation are absorbing: the arrival reward repeats forever."""
    g = learner.sac_cfg.gamma
    return np.where(goal | violated, rewards / (1.0 - g), 0.0)


def _update(learner: SkillLearner, replay: SkillReplay, rng: np.random.Generator) -> dict:
    cfg, sc = learner.cfg, learner.sac_cfg
    b = replay.sample(sc.batch_size, rng)
    disc_loss = learner.disc.update(b["s_next"], b["z"])
    r = smm_reward(b["s_next"], b["z"], learner.disc, learner.density, learner.prior,
                   learner.env, cfg,
                   log_rho=b["log_rho"] if cfg.use_density else np.zeros(len(b["z"])))
    r = r * sc.reward_scale
    terminal = b["goal"] | b["violated"]
    stats = sac_update(learner.agent, learner.obs(b["s"], b["z"]), b["a"], r,
                       learner.obs(b["s_next"], b["z"]), terminal, rng,
                       _terminal_values(learner, r, b["goal"], b["violated"]))
    stats["disc"] = disc_loss
    return stats


def pretrain(learner: SkillLearner, seed: int, n_steps: int | None = None,
             replay: SkillReplay | None = None, log_every: int = 10) -> SkillReplay:
    """Run SMM pretraining for ``n_steps`` environment steps (whole episodes;
    the last episode may overrun the budget). Mutates ``learner``."""
    cfg, sc, env = learner.cfg, learner.sac_cfg, learner.env
    n_steps = cfg.n_pretrain_steps if n_steps is None else n_steps
    replay = replay or SkillReplay(min(sc.buffer_size, max(n_steps + env.horizon, 1)))
    rng = seeding.rng(seed, "pretrain", learner.episodes)
    target = learner.steps + n_steps
    while learner.steps < target:
        ep_idx = learner.episodes
        z = learner.prior.sample(rng)
        sim = PointEnv(env)
        s = sim.reset(seeding.child_seed(seed, "pretrain-episode", ep_idx))
        ret, intrinsic, reached = 0.0, 0.0, False
        for _ in range(env.horizon):
            if learner.steps < sc.start_steps:
                a = rng.uniform(-env.a_max, env.a_max, size=2)
            else:
                a = learner.agent.act(learner.obs(s, z), rng)
            tr = sim.step(a)
            use_rho = cfg.use_density and cfg.c_state and learner.density.fitted(z)
            log_rho = float(learner.density.log_density(z, tr.s_next)[0]) if use_rho else 0.0
            timeout = tr.done and not tr.c and tr.r != 0.0
            replay.add(s=tr.s, a=tr.a, s_next=tr.s_next, z=z, goal=tr.r == 0.0,
                       violated=tr.c, timeout=timeout, log_rho=log_rho)
            learner.density.add(z, tr.s_next)
            learner.steps += 1
            ret += tr.r
            intrinsic += log_p_star(tr.s_next, env, cfg)
            reached |= tr.r == 0.0
            if cfg.use_density and learner.steps % cfg.density_refit == 0:
                learner.density.fit()
            if learner.steps >= sc.start_steps and len(replay) >= sc.batch_size:
                _update(learner, replay, rng)
            s = tr.s_next
            if tr.done:
                break
        learner.episodes += 1
        learner.history.append({"episode": ep_idx, "skill": z, "return": ret,
                                "log_p_star": intrinsic, "goal": reached,
                                "violated": bool(tr.c), "steps": learner.steps})
        if log_every and ep_idx % log_every == 0:
            log.info("pretrain episode %d skill %d return %.0f goal %s steps %d",
                     ep_idx, z, ret, reached, learner.steps)
    return replay


def discriminator_accuracy(learner: SkillLearner, replay: SkillReplay, n: int = 2000,
                           seed: int = 0) -> float:
    b = replay.sample(min(n, len(replay)), seeding.rng(seed, "disc-acc"))
    return learner.disc.accuracy(b["s_next"], b["z"])


# --- skill rollouts, selection and collection ----------------------------------------------

def skill_rollout(learner: SkillLearner, z: int, seed: int, start=None,
                  origin: str = "online", deterministic: bool = False) -> EpisodeRecord:
    rng = seeding.rng(seed, "skill-actions")
    sim = PointEnv(learner.env)
    s = sim.reset(seed, start=start)
    transitions = []
    for _ in range(learner.env.horizon):
        a = learner.agent.act(learner.obs(s, z), rng, deterministic=deterministic)
        tr = sim.step(a)
        transitions.append(tr)
        s = tr.s_next
        if tr.done:
            break
    return EpisodeRecord.from_transitions(transitions, origin=origin, skill=int(z))


@dataclass
class SkillSummary:
    skill: int
    n_rollouts: int
    mean_return: float
    goal_rate: float
    in_z_gr: bool


def identify_goal_skills(learner: SkillLearner, n_samples: int, r_min: float, seed: int
                         ) -> tuple[list[int], list[SkillSummary]]:
    """Skills with at least one evaluation rollout whose extrinsic return is >= r_min.

    Returns are absorbed (see :func:`safelab.env.absorbed_return`) so an early
    crash cannot pass for a fast goal reach.
    """
    rng = seeding.rng(seed, "identify")
    returns: dict[int, list[float]] = {z: [] for z in range(learner.prior.n_skills)}
    goals: dict[int, list[bool]] = {z: [] for z in range(learner.prior.n_skills)}
    z_gr: set[int] = set()
    for i in range(n_samples):
        z = learner.prior.sample(rng)
        ep = skill_rollout(learner, z, seeding.child_seed(seed, "identify", i))
        ret = absorbed_return(ep, learner.env.horizon)
        returns[z].append(ret)
        goals[z].append(ep.reached_goal)
        if ret >= r_min:
            z_gr.add(z)
    summary = [SkillSummary(z, len(returns[z]),
                            float(np.mean(returns[z])) if returns[z] else float("nan"),
                            float(np.mean(goals[z])) if goals[z] else float("nan"),
                            z in z_gr)
               for z in range(learner.prior.n_skills)]
    return sorted(z_gr), summary


@dataclass
class CollectionReport:
    n_gr: int
    n_cv: int
    gr_attempts: int
    cv_attempts: int
    complete: bool
    message: str = ""


def collect_datasets(learner: SkillLearner, z_gr, n_dataset: int, seed: int,
                     max_attempts_factor: int | None = None, collect_gr: bool = True,
                     collect_cv: bool = True) -> tuple[Dataset, CollectionReport]:
    """D_gr from skills in ``z_gr`` starting at mu; D_constr from any skill
    starting uniformly in free space, keeping violating trajectories only."""
    z_gr = sorted(set(int(z) for z in z_gr))
    if collect_gr and not z_gr:
        raise CollectionError("no goal-reaching skills: Z_gr is empty")
    factor = learner.cfg.max_attempts_factor if max_attempts_factor is None else max_attempts_factor
    budget = max(n_dataset * factor, n_dataset)
    env = learner.env
    ds = Dataset(env.name)
    rng = seeding.rng(seed, "collect")
    gr_attempts = cv_attempts = 0
    n_gr = n_cv = 0
    if collect_gr:
        while n_gr < n_dataset and gr_attempts < budget:
            z = z_gr[int(rng.integers(len(z_gr)))]
            ep = skill_rollout(learner, z, seeding.child_seed(seed, "collect-gr", gr_attempts),
                               origin="offline_gr")
            gr_attempts += 1
            if ep.reached_goal:
                ds.add(ep)
                n_gr += 1
    if collect_cv:
        while n_cv < n_dataset and cv_attempts < budget:
            z = learner.prior.sample(rng)
            start_seed = seeding.child_seed(seed, "collect-cv", cv_attempts)
            start = sample_free_state(env, seeding.rng(start_seed, "start"))
            ep = skill_rollout(learner, z, start_seed, start=start, origin="offline_cv")
            cv_attempts += 1
            if ep.violated:
                ds.add(ep)
                n_cv += 1
    want_gr = n_dataset if collect_gr else 0
    want_cv = n_dataset if collect_cv else 0
    complete = n_gr >= want_gr and n_cv >= want_cv
    msg = "" if complete else (f"attempt budget {budget} exhausted: collected {n_gr}/{want_gr} "
                               f"goal-reaching and {n_cv}/{want_cv} violating trajectories")
    if msg:
        log.warning(msg)
    return ds, CollectionReport(n_gr, n_cv, gr_attempts, cv_attempts, complete, msg)


# --- outputs -------------------------------------------------------------------------------

def summary_csv(summary: list[SkillSummary], config_hash: str = "") -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["skill", "n_rollouts", "mean_return", "goal_rate", "in_z_gr"])
    for row in summary:
        w.writerow([row.skill, row.n_rollouts, repr(row.mean_return), repr(row.goal_rate),
                    int(row.in_z_gr)])
    return buf.getvalue()


def save_learner(learner: SkillLearner, directory: str | Path, config_hash: str = "") -> None:
    directory = Path(directory)
    nets = dict(learner.agent.networks(), discriminator=learner.disc.net)
    for name, net in nets.items():
        approx.save_nets(directory / f"{name}.npn", [net], {"config_hash": config_hash})
    manifest = {"config_hash": config_hash, "env": learner.env.name,
                "smm": asdict(learner.cfg), "sac": asdict(learner.sac_cfg),
                "steps": learner.steps, "episodes": learner.episodes}
    atomic_write_text(directory / "agent.json", json.dumps(manifest, indent=1))


def load_learner(directory: str | Path, env: EnvConfig) -> tuple[SkillLearner, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "agent.json").read_text())
    learner = make_learner(env, SmmConfig(**manifest["smm"]), SacConfig(**manifest["sac"]))
    nets = dict(learner.agent.networks(), discriminator=learner.disc.net)
    for name, net in nets.items():
        net.load_params(approx.load_nets(directory / f"{name}.npn")[0][0])
    learner.steps = manifest["steps"]
    learner.episodes = manifest["episodes"]
    return learner, manifest
