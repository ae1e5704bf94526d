"""Unsupervised pipeline on SPB: SMM pretraining, goal-skill selection,
dataset collection, offline training and online episodes.

    python3 scripts/unsup_pipeline.py --seeds 0 1 2 --episodes 100 --out runs/unsup
"""

from __future__ import annotations

import argparse
import csv
import logging
from pathlib import Path

from safelab import config as cfgmod
from safelab.experiments import run_unsup_pipeline
from safelab.unsup import summary_csv


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--preset", choices=("full", "desk"), default="desk")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--out", default="runs/unsup")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    base = cfgmod.desk_preset() if args.preset == "desk" else cfgmod.RunConfig()
    base = cfgmod.apply_overrides(base, args.set)
    chash = cfgmod.config_hash(base)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in args.seeds:
        r = run_unsup_pipeline(base, seed, args.episodes)
        (out / f"skills_s{seed}.csv").write_text(summary_csv(r.summary, chash))
        with open(out / f"pretrain_s{seed}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(r.history[0]) if r.history else ["episode"])
            w.writeheader()
            w.writerows(r.history)
        if r.report is not None:
            r.report.save(out / f"report_s{seed}.csv")
        coll = r.collection
        print(f"seed {seed}: Z_gr={r.z_gr} "
              f"dataset={(coll.n_gr, coll.n_cv) if coll else None} "
              f"constr_all_violating={r.cv_all_violate} "
              f"online_goals={r.report.n_goal if r.report else 0} "
              f"pretrain_min={r.pretrain_seconds / 60:.1f} total_min={r.seconds / 60:.1f}",
              flush=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
