"""Unsupervised data collection: skill-conditioned SAC with SMM/DIAYN rewards."""

from safelab.unsup.density import KdeDensity, NotFittedError, VaeDensity, make_density
from safelab.unsup.sac import (SacAgent, SacConfig, sac_policy_loss, sac_q_loss,
                               sac_update, sac_value_loss)
from safelab.unsup.skills import (CollectionError, CollectionReport, Discriminator,
                                  SkillLearner, SkillPrior, SkillReplay, SkillSummary,
                                  SmmConfig, collect_datasets, diayn_reward,
                                  discriminator_accuracy, identify_goal_skills, load_learner,
                                  log_p_star, make_learner, pretrain, save_learner,
                                  skill_rollout, smm_reward, summary_csv)

__all__ = [
    "KdeDensity", "NotFittedError", "VaeDensity", "make_density", "SacAgent", "SacConfig",
    "sac_policy_loss", "sac_q_loss", "sac_update", "sac_value_loss", "CollectionError",
    "CollectionReport", "Discriminator", "SkillLearner", "SkillPrior", "SkillReplay",
    "SkillSummary", "SmmConfig", "collect_datasets", "diayn_reward", "discriminator_accuracy",
    "identify_goal_skills", "load_learner", "log_p_star", "make_learner", "pretrain",
    "save_learner", "skill_rollout", "smm_reward", "summary_csv",
]
