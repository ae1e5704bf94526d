"""SMM pretraining diagnostics: goal and violation rates over training,
coverage around the obstacle, discriminator accuracy and the skill summary.

    python3 scripts/smm_exploration.py --steps 40000 --set sac.reward_scale=1.0
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from safelab import config as cfgmod
from safelab.unsup import (discriminator_accuracy, identify_goal_skills, make_learner,
                           pretrain, summary_csv)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, help="default smm.n_pretrain_steps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bucket", type=int, default=50, help="episodes per progress row")
    p.add_argument("--preset", choices=("full", "desk"), default="desk")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    args = p.parse_args(argv)

    cfg = cfgmod.desk_preset() if args.preset == "desk" else cfgmod.RunConfig()
    cfg = cfgmod.apply_overrides(cfg, args.set)
    env = cfg.env_config()
    learner = make_learner(env, cfg.smm, cfg.sac, args.seed)
    t0 = time.time()
    replay = pretrain(learner, args.seed, args.steps, log_every=0)
    h = learner.history
    print("episodes  goal  viol  log_p*")
    for k in range(0, len(h), args.bucket):
        c = h[k:k + args.bucket]
        print(f"{k:8d}  {np.mean([e['goal'] for e in c]):.2f}  "
              f"{np.mean([e['violated'] for e in c]):.2f}  "
              f"{np.mean([e['log_p_star'] for e in c]):8.0f}")
    s = replay.sample(min(len(replay), 20000), np.random.default_rng(0))["s_next"]
    x0, x1, y0, y1 = env.obstacles[0]
    around = np.mean((s[:, 0] > x0) & ((s[:, 1] > y1) | (s[:, 1] < y0)))
    print(f"states beside the obstacle: {around:.2f}, max x {s[:, 0].max():.1f}")
    print(f"discriminator accuracy: {discriminator_accuracy(learner, replay):.2f}")
    z_gr, summary = identify_goal_skills(learner, cfg.smm.n_samples, cfg.smm.r_min, args.seed)
    print(f"Z_gr = {z_gr}")
    print(summary_csv(summary, cfgmod.config_hash(cfg)))
    print(f"{time.time() - t0:.0f} s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
