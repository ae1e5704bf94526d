"""Point-mass navigation CMDPs: SimplePointBot, Bottleneck, SimpleVelocityBot.

All three tasks share one arena, a sparse reward (0 inside the goal ball,
-1 elsewhere) and a closed constraint region made of axis-aligned rectangles.
Episodes terminate on goal entry, on constraint violation, or after ``horizon``
steps.

Config file schema (``[env]`` section, ``key = value``)::

    name            spb | bottleneck | svb
    arena           width, height
    obstacles       xmin, xmax, ymin, ymax; xmin, xmax, ymin, ymax; ...
    start           x, y
    start_mode      point | uniform
    goal            x, y
    goal_radius     float > 0
    a_max           float > 0   (per action component)
    v_max           float > 0   (svb only; speed bound)
    horizon         int >= 1
    dynamics        velocity | acceleration
    noise_std       float >= 0  (Gaussian noise added to each position update)
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from safelab import seeding

Rect = tuple[float, float, float, float]  # xmin, xmax, ymin, ymax

ORIGINS = ("offline_gr", "offline_cv", "online")


class MalformedInput(ValueError):
    """Raised for non-finite or wrongly shaped states/actions."""


@dataclass(frozen=True)
class EnvConfig:
    name: str = "spb"
    arena: tuple[float, float] = (100.0, 75.0)
    obstacles: tuple[Rect, ...] = ((30.0, 70.0, 25.0, 50.0),)
    start: tuple[float, float] = (10.0, 37.5)
    start_mode: str = "point"
    goal: tuple[float, float] = (90.0, 37.5)
    goal_radius: float = 3.0
    a_max: float = 1.0
    v_max: float = 3.0
    horizon: int = 100
    dynamics: str = "velocity"
    noise_std: float = 0.0

    def __post_init__(self):
        if self.goal_radius <= 0:
            raise ValueError("goal_radius must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.a_max <= 0 or self.v_max <= 0:
            raise ValueError("a_max and v_max must be positive")
        if self.start_mode not in ("point", "uniform"):
            raise ValueError(f"unknown start_mode {self.start_mode!r}")
        if self.dynamics not in ("velocity", "acceleration"):
            raise ValueError(f"unknown dynamics {self.dynamics!r}")
        for rect in self.obstacles:
            if _rect_distance(rect, self.goal) <= self.goal_radius:
                raise ValueError(f"goal ball intersects constraint region {rect}")
        if in_constraint(self, np.asarray(self.start)):
            raise ValueError("start state lies in the constraint region")

    @property
    def state_dim(self) -> int:
        return 2

    @property
    def action_dim(self) -> int:
        return 2

    @property
    def area(self) -> float:
        return self.arena[0] * self.arena[1]


def _rect_distance(rect: Rect, p: Sequence[float]) -> float:
    xmin, xmax, ymin, ymax = rect
    dx = max(xmin - p[0], 0.0, p[0] - xmax)
    dy = max(ymin - p[1], 0.0, p[1] - ymax)
    return math.hypot(dx, dy)


def spb_config(**overrides) -> EnvConfig:
    return replace(EnvConfig(), **overrides)


def bottleneck_config(**overrides) -> EnvConfig:
    # two chambers joined by the corridor x in [40, 60], y in [32, 43]
    walls = ((40.0, 60.0, 0.0, 32.0), (40.0, 60.0, 43.0, 75.0))
    return replace(EnvConfig(name="bottleneck", obstacles=walls), **overrides)


def svb_config(**overrides) -> EnvConfig:
    return replace(EnvConfig(name="svb", a_max=0.5, v_max=3.0,
                             dynamics="acceleration"), **overrides)


ENV_FACTORIES = {"spb": spb_config, "bottleneck": bottleneck_config, "svb": svb_config}


def make_config(name: str, **overrides) -> EnvConfig:
    try:
        return ENV_FACTORIES[name](**overrides)
    except KeyError:
        raise ValueError(f"unknown environment id {name!r}; "
                         f"expected one of {sorted(ENV_FACTORIES)}") from None


# --- geometry -----------------------------------------------------------------

def in_goal(cfg: EnvConfig, s) -> np.ndarray | bool:
    s = np.asarray(s, dtype=float)
    d = np.linalg.norm(s[..., :2] - np.asarray(cfg.goal), axis=-1)
    return d <= cfg.goal_radius


def reward(cfg: EnvConfig, s_next) -> np.ndarray | float:
    """0 inside the (closed) goal ball, -1 elsewhere. Vectorised over leading axes."""
    r = np.where(in_goal(cfg, s_next), 0.0, -1.0)
    return float(r) if r.ndim == 0 else r


def in_constraint(cfg: EnvConfig, s) -> np.ndarray | bool:
    """Closed-rectangle membership; boundary points count as violations."""
    s = np.asarray(s, dtype=float)
    x, y = s[..., 0], s[..., 1]
    hit = np.zeros(np.shape(x), dtype=bool)
    for xmin, xmax, ymin, ymax in cfg.obstacles:
        hit |= (x >= xmin) & (x <= xmax) & (y >= ymin) & (y <= ymax)
    return bool(hit) if hit.ndim == 0 else hit


def constraint_centers(cfg: EnvConfig) -> np.ndarray:
    return np.array([[(r[0] + r[1]) / 2, (r[2] + r[3]) / 2] for r in cfg.obstacles])


def sample_free_state(cfg: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample over the arena with the constraint region rejected."""
    w, h = cfg.arena
    while True:
        s = rng.uniform((0.0, 0.0), (w, h))
        if not in_constraint(cfg, s):
            return s


# --- records ------------------------------------------------------------------

@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    c: bool
    done: bool
    skill: int | None = None


@dataclass
class EpisodeRecord:
    """One episode stored column-wise. Row ``t`` is the transition from step t."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    constraints: np.ndarray
    dones: np.ndarray
    origin: str = "online"
    skill: int | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float).reshape(-1, 2)
        n = len(self.states)
        self.actions = np.asarray(self.actions, dtype=float).reshape(n, -1)
        self.rewards = np.asarray(self.rewards, dtype=float).reshape(n)
        self.next_states = np.asarray(self.next_states, dtype=float).reshape(n, 2)
        self.constraints = np.asarray(self.constraints, dtype=bool).reshape(n)
        self.dones = np.asarray(self.dones, dtype=bool).reshape(n)
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin tag {self.origin!r}")

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition], origin: str = "online",
                         skill: int | None = None) -> "EpisodeRecord":
        if not transitions:
            raise ValueError("an episode needs at least one transition")
        return cls(states=[t.s for t in transitions],
                   actions=[t.a for t in transitions],
                   rewards=[t.r for t in transitions],
                   next_states=[t.s_next for t in transitions],
                   constraints=[t.c for t in transitions],
                   dones=[t.done for t in transitions],
                   origin=origin, skill=skill)

    def __len__(self) -> int:
        return len(self.rewards)

    def __iter__(self) -> Iterator[Transition]:
        for t in range(len(self)):
            yield Transition(self.states[t], self.actions[t], float(self.rewards[t]),
                             self.next_states[t], bool(self.constraints[t]),
                             bool(self.dones[t]), self.skill)

    @property
    def transitions(self) -> list[Transition]:
        return list(self)

    @property
    def total_return(self) -> float:
        return float(self.rewards.sum())

    @property
    def reached_goal(self) -> bool:
        return bool(np.any(self.rewards == 0.0))

    @property
    def violated(self) -> bool:
        return bool(np.any(self.constraints))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EpisodeRecord):
            return NotImplemented
        return (self.origin == other.origin and self.skill == other.skill
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("states", "actions", "rewards", "next_states",
                                  "constraints", "dones")))


def absorbed_return(ep: EpisodeRecord, horizon: int) -> float:
    """Return with failure running on to the horizon.

    An episode cut short by a violation never reaches the goal; the violation
    is absorbing, so its cost keeps accruing and the return is -T.
    """
    return ep.total_return if ep.reached_goal else -float(horizon)


def normalized_return(ep: EpisodeRecord, horizon: int) -> float:
    """(T + return) / T; 1 for an immediate goal reach, 0 for never."""
    return max(0.0, (horizon + absorbed_return(ep, horizon)) / horizon)


# --- environment ----------------------------------------------------------------

class PointEnv:
    """Stateful single-episode simulator over an :class:`EnvConfig`.

    For ``dynamics == "acceleration"`` the velocity is hidden internal state;
    observations are positions only.
    """

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self.state = np.asarray(cfg.start, dtype=float)
        self.velocity = np.zeros(2)
        self.t = 0
        self._rng = np.random.default_rng(0)

    def reset(self, seed: int, start=None) -> np.ndarray:
        self._rng = seeding.rng(seed, "env")
        if start is not None:
            s = np.asarray(start, dtype=float)
        elif self.cfg.start_mode == "point":
            s = np.asarray(self.cfg.start, dtype=float)
        else:
            s = sample_free_state(self.cfg, self._rng)
        self.state = s.copy()
        self.velocity = np.zeros(2)
        self.t = 0
        return self.state.copy()

    def step(self, action) -> Transition:
        a = np.asarray(action, dtype=float).reshape(-1)
        if a.shape != (2,) or not np.all(np.isfinite(a)):
            raise MalformedInput(f"action must be 2 finite numbers, got {action!r}")
        cfg = self.cfg
        a = np.clip(a, -cfg.a_max, cfg.a_max)
        s = self.state
        if cfg.dynamics == "velocity":
            delta = a
        else:
            v = self.velocity + a
            speed = np.linalg.norm(v)
            if speed > cfg.v_max:
                v *= cfg.v_max / speed
            self.velocity = v
            delta = v
        if cfg.noise_std > 0:
            delta = delta + self._rng.normal(0.0, cfg.noise_std, size=2)
        s_next = np.clip(s + delta, (0.0, 0.0), cfg.arena)
        if cfg.dynamics == "acceleration":
            # walls absorb the velocity component pushing into them
            pinned = (s_next <= 0.0) | (s_next >= np.asarray(cfg.arena))
            self.velocity[pinned] = 0.0
        r = reward(cfg, s_next)
        c = in_constraint(cfg, s_next)
        assert not (c and r == 0.0), "state both in goal and constraint"
        self.t += 1
        done = (r == 0.0) or c or self.t >= cfg.horizon
        self.state = s_next
        return Transition(s.copy(), a, r, s_next.copy(), c, done)


def step(env: PointEnv, s, a) -> Transition:
    """Step ``env`` from state ``s`` (must match its current position)."""
    s = np.asarray(s, dtype=float)
    if not np.all(np.isfinite(s)):
        raise MalformedInput("non-finite state")
    env.state = s.copy()
    return env.step(a)


def reset(cfg: EnvConfig, seed: int) -> np.ndarray:
    return PointEnv(cfg).reset(seed)


def rollout(cfg: EnvConfig, policy, seed: int, origin: str = "online",
            skill: int | None = None, start=None) -> EpisodeRecord:
    """Run ``policy(t, s) -> action`` for one episode."""
    env = PointEnv(cfg)
    s = env.reset(seed, start=start)
    transitions = []
    for t in range(cfg.horizon):
        tr = env.step(policy(t, s))
        transitions.append(tr)
        s = tr.s_next
        if tr.done:
            break
    return EpisodeRecord.from_transitions(transitions, origin=origin, skill=skill)


# --- config file ---------------------------------------------------------------

def _fmt_floats(xs) -> str:
    return ", ".join(repr(float(x)) for x in xs)


def config_to_dict(cfg: EnvConfig) -> dict[str, str]:
    return {
        "name": cfg.name,
        "arena": _fmt_floats(cfg.arena),
        "obstacles": "; ".join(_fmt_floats(r) for r in cfg.obstacles),
        "start": _fmt_floats(cfg.start),
        "start_mode": cfg.start_mode,
        "goal": _fmt_floats(cfg.goal),
        "goal_radius": repr(float(cfg.goal_radius)),
        "a_max": repr(float(cfg.a_max)),
        "v_max": repr(float(cfg.v_max)),
        "horizon": str(cfg.horizon),
        "dynamics": cfg.dynamics,
        "noise_std": repr(float(cfg.noise_std)),
    }


def _floats(text: str, n: int | None = None) -> tuple[float, ...]:
    vals = tuple(float(v) for v in text.split(","))
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} numbers, got {text!r}")
    return vals


def config_from_dict(d: dict[str, str]) -> EnvConfig:
    base = make_config(d.get("name", "spb").strip())
    kw = {}
    if "arena" in d:
        kw["arena"] = _floats(d["arena"], 2)
    if "obstacles" in d:
        kw["obstacles"] = tuple(_floats(r, 4) for r in d["obstacles"].split(";") if r.strip())
    for key in ("start", "goal"):
        if key in d:
            kw[key] = _floats(d[key], 2)
    for key in ("goal_radius", "a_max", "v_max", "noise_std"):
        if key in d:
            kw[key] = float(d[key])
    if "horizon" in d:
        kw["horizon"] = int(d["horizon"])
    for key in ("start_mode", "dynamics"):
        if key in d:
            kw[key] = d[key].strip()
    return replace(base, **kw)


def save_config(cfg: EnvConfig, path: str | Path) -> None:
    parser = configparser.ConfigParser()
    parser["env"] = config_to_dict(cfg)
    with open(path, "w") as fh:
        parser.write(fh)


def load_config(path: str | Path) -> EnvConfig:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    return config_from_dict(dict(parser["env"]))
