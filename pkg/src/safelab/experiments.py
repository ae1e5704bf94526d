"""End-to-end experiment drivers shared by the acceptance suite and scripts/.

Seeds follow the same derivation as the CLI, so ``run_arm`` with a given
``RunConfig`` reproduces ``gen-demos`` + ``train-offline`` + ``run-online``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

from safelab import config as cfgmod
from safelab import demos, seeding
from safelab.dataset import Dataset
from safelab.models import train_offline
from safelab.safe_loop import TrainReport, run_online, safe_set_area
from safelab.unsup import (CollectionReport, SkillSummary, collect_datasets,
                           identify_goal_skills, make_learner, pretrain)

log = logging.getLogger(__name__)


@dataclass
class ArmResult:
    seed: int
    n_demos: int
    forgetting: bool
    offline_area: float
    report: TrainReport
    seconds: float

    def area_after(self, n_episodes: int) -> float:
        """Safe-set area once ``n_episodes`` online episodes have finished."""
        return self.report.rows[n_episodes - 1].safe_area

    def goals_within(self, n_episodes: int) -> int:
        return sum(r.reached_goal for r in self.report.rows[:n_episodes])


def arm_config(base: cfgmod.RunConfig, seed: int, n_demos: int, forgetting: bool,
               n_episodes: int) -> cfgmod.RunConfig:
    return replace(
        base,
        run=replace(base.run, seed=seed, mode="controller", n_gr=n_demos, n_cv=n_demos),
        forgetting=replace(base.forgetting, enabled=forgetting),
        online=replace(base.online, n_episodes=n_episodes),
    )


def _online(cfg: cfgmod.RunConfig, ds: Dataset, on_episode=None):
    env = cfg.env_config()
    bundle, _ = train_offline(ds, cfg.models, seeding.rng(cfg.run.seed, "train-offline"))
    res = (cfg.online.area_nx, cfg.online.area_ny)
    area0 = safe_set_area(bundle, env, res)
    report = run_online(env, bundle, ds, cfg.cem(), cfg.forgetting, cfg.online.n_episodes,
                        seeding.child_seed(cfg.run.seed, "online"),
                        update_steps=cfg.online.update_steps, area_resolution=res,
                        on_episode=on_episode)
    report.config_hash = cfgmod.config_hash(cfg)
    return area0, report


def run_arm(base: cfgmod.RunConfig, seed: int, n_demos: int, forgetting: bool,
            n_episodes: int, on_episode=None) -> ArmResult:
    """Controller demos (n_demos goal-reaching + n_demos violating), offline
    training, then ``n_episodes`` online episodes."""
    t0 = time.time()
    cfg = arm_config(base, seed, n_demos, forgetting, n_episodes)
    env = cfg.env_config()
    ds = demos.generate_demos(env, n_demos, n_demos, seeding.child_seed(seed, "demos"))
    area0, report = _online(cfg, ds, on_episode)
    return ArmResult(seed, n_demos, forgetting, area0, report, time.time() - t0)


@dataclass
class UnsupResult:
    seed: int
    z_gr: list[int]
    summary: list[SkillSummary]
    collection: CollectionReport | None = None
    dataset: Dataset | None = None
    report: TrainReport | None = None
    pretrain_seconds: float = 0.0
    seconds: float = 0.0
    history: list[dict] = field(default_factory=list)

    @property
    def cv_all_violate(self) -> bool:
        return self.dataset is not None and all(ep.violated for ep in self.dataset.constr)


def run_unsup_pipeline(base: cfgmod.RunConfig, seed: int, n_episodes: int,
                       on_episode=None) -> UnsupResult:
    """SMM pretraining, goal-skill identification, dataset collection, offline
    training and ``n_episodes`` online episodes. Stops early (with the
    partial result) when Z_gr is empty or collection comes up short."""
    t0 = time.time()
    cfg = replace(base, run=replace(base.run, seed=seed, mode="unsupervised"),
                  online=replace(base.online, n_episodes=n_episodes))
    env = cfg.env_config()
    useed = seeding.child_seed(seed, "unsup")
    learner = make_learner(env, cfg.smm, cfg.sac, useed)
    pretrain(learner, useed, cfg.smm.n_pretrain_steps, log_every=50)
    t_pre = time.time() - t0
    cseed = seeding.child_seed(seed, "collect")
    z_gr, summary = identify_goal_skills(learner, cfg.smm.n_samples, cfg.smm.r_min, cseed)
    out = UnsupResult(seed, z_gr, summary, pretrain_seconds=t_pre, history=learner.history)
    log.info("seed %d pretrained in %.0f s, Z_gr = %s", seed, t_pre, z_gr)
    if not z_gr:
        out.seconds = time.time() - t0
        return out
    ds, coll = collect_datasets(learner, z_gr, cfg.smm.n_dataset, cseed)
    out.collection, out.dataset = coll, ds
    if coll.complete:
        _, out.report = _online(cfg, _clone(ds), on_episode)
    out.seconds = time.time() - t0
    return out


def _clone(ds: Dataset) -> Dataset:
    twin = Dataset(ds.env_name)
    twin.extend(list(ds.episodes))
    return twin
