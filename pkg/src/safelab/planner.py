"""Chance-constrained CEM over TS-1 particle rollouts.

A candidate action sequence is scored by the particle mean of
``sum_{i=1}^{H-1} f_G(s_{t+i}) + V(s_{t+H})`` and is feasible when at least
``safe_fraction`` of particles end inside the learned safe set and at no
predicted step more than ``delta_c`` of particles are flagged by the
constraint estimator.

The planner only needs a model object exposing ``dyn`` (sized),
``dyn_member(m, states, actions) -> (mean, var)``, ``goal_fn``, ``value_fn``,
``safe_fn`` and ``constraint_fn``; :class:`safelab.models.ModelBundle` is one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from safelab import seeding
from safelab.models import ts1_rollout


@dataclass
class CemConfig:
    horizon: int = 5
    n_candidates: int = 1000
    n_elite: int = 100
    n_iterations: int = 5
    n_particles: int = 20
    safe_fraction: float = 0.8
    delta_c: float = 0.2
    a_max: float = 1.0
    action_dim: int = 2
    var_floor: float = 1e-4
    threshold: float = 0.5

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 1 <= self.n_elite <= self.n_candidates:
            raise ValueError("need 1 <= n_elite <= n_candidates")
        if self.n_particles < 1 or self.n_iterations < 1:
            raise ValueError("n_particles and n_iterations must be >= 1")
        for name in ("safe_fraction", "delta_c"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class PlanResult:
    actions: np.ndarray  # (H, action_dim)
    objective: float
    feasible: bool
    safe_frac: float
    viol_frac: float
    elite_means: list[float] = field(default_factory=list)
    elite_feasible: list[bool] = field(default_factory=list)
    n_feasible: int = 0


def score_candidates(model, s_t, actions, cfg: CemConfig, rng: np.random.Generator
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(objective, safe_frac, viol_frac) for a batch of sequences (N, H, a)."""
    actions = np.asarray(actions, dtype=float)
    traj = ts1_rollout(model, s_t, actions, cfg.n_particles, rng)  # (N, P, H+1, d)
    n, p, h1, d = traj.shape
    future = traj[:, :, 1:].reshape(-1, d)  # s_{t+1} .. s_{t+H}
    terminal = traj[:, :, -1].reshape(-1, d)
    goal = model.goal_fn(future).reshape(n, p, h1 - 1)
    objective = goal[:, :, :-1].sum(axis=2) + model.value_fn(terminal).reshape(n, p)
    safe = model.safe_fn(terminal).reshape(n, p) >= cfg.threshold
    flagged = model.constraint_fn(future).reshape(n, p, h1 - 1) >= cfg.threshold
    return objective.mean(axis=1), safe.mean(axis=1), flagged.mean(axis=1).max(axis=1)


def score_candidate(model, s_t, actions, cfg: CemConfig, seed: int
                    ) -> tuple[float, float, float]:
    obj, sf, vf = score_candidates(model, s_t, np.asarray(actions)[None], cfg,
                                   seeding.rng(seed, "score"))
    return float(obj[0]), float(sf[0]), float(vf[0])


def feasible(safe_frac, viol_frac, cfg: CemConfig):
    ok = (np.asarray(safe_frac) >= cfg.safe_fraction) & (np.asarray(viol_frac) <= cfg.delta_c)
    return bool(ok) if np.ndim(ok) == 0 else ok


def cem_plan(model, s_t, cfg: CemConfig, seed: int) -> PlanResult:
    rng = seeding.rng(seed, "cem")
    shape = (cfg.horizon, cfg.action_dim)
    lo, hi = -cfg.a_max, cfg.a_max
    pool_a = np.zeros((0, *shape))
    pool_obj = pool_sf = pool_vf = np.zeros(0)
    mean = std = None
    elite_means, elite_feas = [], []
    best = None  # (objective, actions, sf, vf)
    fallback = None  # (margin, objective, actions, sf, vf)
    n_feasible = 0
    for it in range(cfg.n_iterations):
        if it == 0:
            cand = rng.uniform(lo, hi, size=(cfg.n_candidates, *shape))
        else:
            cand = np.clip(mean + std * rng.standard_normal((cfg.n_candidates, *shape)), lo, hi)
        obj, sf, vf = score_candidates(model, s_t, cand, cfg, rng)
        ok = feasible(sf, vf, cfg)
        n_feasible += int(ok.sum())
        if ok.any():
            i = int(np.argmax(np.where(ok, obj, -np.inf)))
            if best is None or obj[i] > best[0]:
                best = (float(obj[i]), cand[i], float(sf[i]), float(vf[i]))
        margin = sf - vf
        j = int(np.lexsort((obj, margin))[-1])
        if fallback is None or (margin[j], obj[j]) > fallback[:2]:
            fallback = (float(margin[j]), float(obj[j]), cand[j], float(sf[j]), float(vf[j]))

        # previous elites compete with the new candidates on their stored scores
        all_a = np.concatenate([pool_a, cand])
        all_obj = np.concatenate([pool_obj, obj])
        all_sf = np.concatenate([pool_sf, sf])
        all_vf = np.concatenate([pool_vf, vf])
        all_ok = feasible(all_sf, all_vf, cfg)
        if all_ok.any():
            idx = np.flatnonzero(all_ok)
            idx = idx[np.argsort(-all_obj[idx], kind="stable")[:cfg.n_elite]]
        else:
            order = np.lexsort((all_obj, all_sf - all_vf))[::-1]
            idx = order[:cfg.n_elite]
        elite_feas.append(bool(all_ok.any()))
        elite_means.append(float(all_obj[idx].mean()))
        pool_a, pool_obj, pool_sf, pool_vf = all_a[idx], all_obj[idx], all_sf[idx], all_vf[idx]
        mean = pool_a.mean(axis=0)
        std = np.sqrt(np.maximum(pool_a.var(axis=0), cfg.var_floor))

    if best is not None:
        obj, acts, sf, vf = best
        return PlanResult(acts, obj, True, sf, vf, elite_means, elite_feas, n_feasible)
    _, obj, acts, sf, vf = fallback
    return PlanResult(acts, obj, False, sf, vf, elite_means, elite_feas, n_feasible)


def act(model, s_t, cfg: CemConfig, seed: int) -> np.ndarray:
    """First action of the planned sequence (receding horizon)."""
    return cem_plan(model, s_t, cfg, seed).actions[0].copy()
