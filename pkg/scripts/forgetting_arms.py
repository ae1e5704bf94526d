"""Online runs from controller demos, with and without optimistic forgetting.

Reproduces the goal-reach and safe-set-area comparison on SPB at desk scale:

    python3 scripts/forgetting_arms.py --demos 25 --episodes 100 --seeds 0 1 2 --out runs/arms

writes one report CSV per (arm, seed) and a summary.csv.
"""

from __future__ import annotations

import argparse
import csv
import logging
from pathlib import Path

from safelab import config as cfgmod
from safelab.experiments import run_arm


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--demos", type=int, default=25, help="goal-reaching and violating demos, each")
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--arms", nargs="+", choices=("forget", "no-forget"),
                   default=["no-forget", "forget"])
    p.add_argument("--preset", choices=("full", "desk"), default="desk")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--out", default="runs/arms")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    base = cfgmod.desk_preset() if args.preset == "desk" else cfgmod.RunConfig()
    base = cfgmod.apply_overrides(base, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for arm in args.arms:
        for seed in args.seeds:
            res = run_arm(base, seed, args.demos, arm == "forget", args.episodes)
            rep = res.report
            rep.save(out / f"report_{arm}_d{args.demos}_s{seed}.csv")
            first = next((r.episode for r in rep.rows if r.reached_goal), "")
            row = {"arm": arm, "seed": seed, "demos": args.demos, "episodes": len(rep),
                   "goals": rep.n_goal, "first_goal": first,
                   "violation_rate": f"{rep.violation_rate:.3f}",
                   "offline_area": f"{res.offline_area:.4f}",
                   "final_area": f"{rep.rows[-1].safe_area:.4f}" if rep.rows else "",
                   "minutes": f"{res.seconds / 60:.1f}", "config_hash": rep.config_hash}
            summary.append(row)
            print(", ".join(f"{k}={v}" for k, v in row.items()), flush=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0]))
        w.writeheader()
        w.writerows(summary)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
