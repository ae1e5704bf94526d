"""``safelab`` command-line driver.

Exit codes: 0 success, 1 usage error, 2 data error, 3 run failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from safelab import config as cfgmod
from safelab import dataset as dsio
from safelab import demos, seeding
from safelab.dataset import Dataset, DatasetFormatError, atomic_write_text
from safelab.models import TrainingRefused, load_bundle, save_bundle, train_offline
from safelab.safe_loop import (OnlineState, TrainReport, export_heatmaps, plan_episode,
                               run_online, state_from_dict, state_to_dict)
from safelab.unsup import (CollectionError, collect_datasets, identify_goal_skills,
                           load_learner, make_learner, pretrain, save_learner, summary_csv)

log = logging.getLogger("safelab")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUN = 0, 1, 2, 3


class DataError(RuntimeError):
    """Inputs exist but cannot be used (hash mismatch, missing files)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# --- helpers -------------------------------------------------------------------------------

def _load_config(args) -> cfgmod.RunConfig:
    base = cfgmod.desk_preset() if args.preset == "desk" else cfgmod.RunConfig()
    cfg = cfgmod.load(args.config, base) if args.config else base
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.env is not None:
        overrides.append(f"run.env={args.env}")
    if args.mode is not None:
        overrides.append(f"run.mode={args.mode}")
    return cfgmod.apply_overrides(cfg, overrides)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_config(cfg, out: Path) -> str:
    chash = cfgmod.config_hash(cfg)
    atomic_write_text(out / "run_config.ini", f"# config_hash={chash}\n" + cfgmod.dumps(cfg))
    return chash


def _curves_csv(curves: dict[str, list[float]], chash: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={chash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "step", "loss"])
    for name, losses in curves.items():
        for i, v in enumerate(losses):
            w.writerow([name, i, repr(float(v))])
    return buf.getvalue()


def _load_dataset(path) -> tuple[Dataset, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset not found: {path}")
    return dsio.load(path)


def _resolution(text: str) -> tuple[int, int]:
    try:
        nx, ny = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 100x75, got {text!r}")
    if nx < 1 or ny < 1:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return nx, ny


# --- commands ------------------------------------------------------------------------------

def cmd_gen_demos(args, cfg) -> int:
    if cfg.run.mode == "unsupervised":
        raise cfgmod.ConfigError("run.mode", "gen-demos needs mode controller or semi_supervised")
    env = cfg.env_config()
    n_gr = cfg.run.n_gr if cfg.run.mode == "controller" else 0
    ds = demos.generate_demos(env, n_gr, cfg.run.n_cv, seeding.child_seed(cfg.run.seed, "demos"))
    out = _out(args)
    chash = _write_run_config(cfg, out)
    path = Path(args.output) if args.output else out / "demos.jsonl"
    dsio.save(ds, path, chash)
    counts = ds.counts()
    print(f"wrote {path}: {len(ds)} episodes "
          f"(offline_gr={counts['offline_gr']}, offline_cv={counts['offline_cv']})")
    return EXIT_OK


def cmd_train_unsup(args, cfg) -> int:
    env = cfg.env_config()
    learner = make_learner(env, cfg.smm, cfg.sac, seeding.child_seed(cfg.run.seed, "unsup"))
    steps = args.steps if args.steps is not None else cfg.smm.n_pretrain_steps
    pretrain(learner, seeding.child_seed(cfg.run.seed, "unsup"), steps)
    out = _out(args)
    chash = _write_run_config(cfg, out)
    save_learner(learner, out / "agent", chash)
    buf = io.StringIO()
    buf.write(f"# config_hash={chash}\n")
    w = csv.writer(buf, lineterminator="\n")
    keys = ["episode", "skill", "return", "log_p_star", "goal", "violated", "steps"]
    w.writerow(keys)
    for row in learner.history:
        w.writerow([row[k] for k in keys])
    atomic_write_text(out / "pretrain_history.csv", buf.getvalue())
    print(f"pretrained {learner.steps} steps over {learner.episodes} episodes -> {out / 'agent'}")
    return EXIT_OK


def cmd_collect_unsup(args, cfg) -> int:
    if cfg.run.mode == "controller":
        raise cfgmod.ConfigError("run.mode", "collect-unsup needs mode unsupervised or semi_supervised")
    env = cfg.env_config()
    agent_dir = Path(args.agent)
    if not (agent_dir / "agent.json").exists():
        raise DataError(f"no agent checkpoint in {agent_dir}")
    learner, _ = load_learner(agent_dir, env)
    seed = seeding.child_seed(cfg.run.seed, "collect")
    z_gr, summary = identify_goal_skills(learner, cfg.smm.n_samples, cfg.smm.r_min, seed)
    out = _out(args)
    chash = _write_run_config(cfg, out)
    atomic_write_text(out / "skill_summary.csv", summary_csv(summary, chash))
    if not z_gr:
        print("no skill reached the return bound; Z_gr is empty", file=sys.stderr)
        return EXIT_RUN
    semi = cfg.run.mode == "semi_supervised"
    n = cfg.smm.n_dataset
    ds, report = collect_datasets(learner, z_gr, n, seed, collect_cv=not semi)
    if semi:
        ds.extend(demos.generate_demos(env, 0, n, seeding.child_seed(cfg.run.seed, "demos")).episodes)
    path = Path(args.output) if args.output else out / "unsup_demos.jsonl"
    dsio.save(ds, path, chash)
    counts = ds.counts()
    print(f"Z_gr = {z_gr}; wrote {path}: offline_gr={counts['offline_gr']}, "
          f"offline_cv={counts['offline_cv']}")
    if not report.complete:
        print(report.message, file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


def cmd_train_offline(args, cfg) -> int:
    ds, _ = _load_dataset(args.dataset)
    env = cfg.env_config()
    bundle, curves = train_offline(ds, cfg.models, seeding.rng(cfg.run.seed, "train-offline"))
    out = _out(args)
    chash = _write_run_config(cfg, out)
    mdir = out / "models"
    save_bundle(bundle, mdir, chash)
    _stamp_model_hash(mdir, cfg)
    atomic_write_text(out / "offline_losses.csv", _curves_csv(curves, chash))
    res = (cfg.online.heatmap_nx, cfg.online.heatmap_ny)
    export_heatmaps(bundle, env, res, out, chash, prefix="offline_")
    print(f"trained on {len(ds)} episodes -> {mdir}")
    return EXIT_OK


def _stamp_model_hash(mdir: Path, cfg) -> None:
    path = mdir / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["model_hash"] = cfgmod.model_hash(cfg)
    atomic_write_text(path, json.dumps(manifest, indent=1))


def _check_models(mdir: Path, cfg) -> tuple:
    if not (mdir / "manifest.json").exists():
        raise DataError(f"no model checkpoint in {mdir}")
    bundle, manifest = load_bundle(mdir)
    want = cfgmod.model_hash(cfg)
    if manifest.get("model_hash") != want:
        raise DataError(f"checkpoint {mdir} was trained under a different configuration "
                        f"(model hash {manifest.get('model_hash')} != {want})")
    return bundle, manifest


def cmd_run_online(args, cfg) -> int:
    if args.no_forgetting:
        cfg = replace(cfg, forgetting=replace(cfg.forgetting, enabled=False))
    if args.episodes is not None:
        cfg = replace(cfg, online=replace(cfg.online, n_episodes=args.episodes))
    env = cfg.env_config()
    out = _out(args)
    ckpt = out / "online_checkpoint"
    report_path = out / "online_report.csv"
    if args.resume:
        if not (ckpt / "state.json").exists():
            raise DataError(f"nothing to resume in {ckpt}")
        bundle, _ = _check_models(ckpt / "models", cfg)
        store, _ = dsio.load(ckpt / "store.jsonl")
        state = state_from_dict(json.loads((ckpt / "state.json").read_text()))
        report = TrainReport.from_csv(report_path.read_text())
    else:
        bundle, _ = _check_models(Path(args.models), cfg)
        store, _ = _load_dataset(args.dataset)
        state, report = OnlineState(), TrainReport()
    chash = _write_run_config(cfg, out)
    report.config_hash = chash
    oc = cfg.online

    def checkpoint(rep, st):
        rep.save(report_path)
        i = st.next_episode
        if i % oc.checkpoint_every == 0 or i == target:
            save_bundle(bundle, ckpt / "models", chash)
            _stamp_model_hash(ckpt / "models", cfg)
            dsio.save(store, ckpt / "store.jsonl", chash)
            atomic_write_text(ckpt / "state.json",
                              json.dumps(dict(state_to_dict(st), config_hash=chash)))
        if i % oc.heatmap_every == 0:
            export_heatmaps(bundle, env, (oc.heatmap_nx, oc.heatmap_ny), out, chash,
                            prefix=f"online_ep{i:04d}_")

    target = oc.n_episodes
    remaining = max(0, target - state.next_episode)
    run_online(env, bundle, store, cfg.cem(), cfg.forgetting, remaining,
               seeding.child_seed(cfg.run.seed, "online"), state=state,
               update_steps=oc.update_steps, area_resolution=(oc.area_nx, oc.area_ny),
               on_episode=checkpoint, report=report)
    report.save(report_path)
    export_heatmaps(bundle, env, (oc.heatmap_nx, oc.heatmap_ny), out, chash, prefix="final_")
    print(f"{len(report)} episodes: {report.n_goal} reached the goal, "
          f"violation rate {report.violation_rate:.3f} -> {report_path}")
    return EXIT_OK


def cmd_export_heatmaps(args, cfg) -> int:
    mdir = Path(args.models)
    if not (mdir / "manifest.json").exists():
        raise DataError(f"no model checkpoint in {mdir}")
    bundle, manifest = load_bundle(mdir)
    out = _out(args)
    paths = export_heatmaps(bundle, cfg.env_config(), args.resolution, out,
                            manifest.get("config_hash", ""))
    print("\n".join(str(p) for p in paths))
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    mdir = Path(args.models)
    if not (mdir / "manifest.json").exists():
        raise DataError(f"no model checkpoint in {mdir}")
    bundle, manifest = load_bundle(mdir)
    env = cfg.env_config()
    seed = seeding.child_seed(cfg.run.seed, "eval")
    rows = []
    for i in range(args.episodes):
        ep, feas = plan_episode(env, bundle, cfg.cem(), seed, i)
        rows.append((i, ep.total_return, int(ep.reached_goal), int(ep.violated), len(ep), feas))
    out = _out(args)
    chash = manifest.get("config_hash", "")
    buf = io.StringIO()
    buf.write(f"# config_hash={chash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["episode", "return", "reached_goal", "violated", "steps", "feasible_frac"])
    w.writerows(rows)
    atomic_write_text(out / "eval.csv", buf.getvalue())
    goals = sum(r[2] for r in rows)
    viol = sum(r[3] for r in rows)
    print(f"{args.episodes} episodes: {goals} reached the goal, {viol} violated")
    return EXIT_OK


# --- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run config (sections per module)")
    common.add_argument("--preset", choices=("full", "desk"), default="full",
                        help="defaults to start from before --config and --set (default: full)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--seed", type=int, help="run.seed (default 0)")
    common.add_argument("--env", choices=("spb", "bottleneck", "svb"), help="run.env (default spb)")
    common.add_argument("--mode", choices=cfgmod.MODES, help="run.mode (default controller)")
    common.add_argument("--out", default="runs/default", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="safelab", description="Safe-set MPC with optimistic forgetting.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-demos", parents=[common], help="controller demonstrations")
    s.add_argument("--output", help="dataset path (default OUT/demos.jsonl)")
    s.set_defaults(func=cmd_gen_demos)

    s = sub.add_parser("train-unsup", parents=[common], help="SMM skill pretraining")
    s.add_argument("--steps", type=int, help="environment steps (default smm.n_pretrain_steps)")
    s.set_defaults(func=cmd_train_unsup)

    s = sub.add_parser("collect-unsup", parents=[common], help="collect a dataset from skills")
    s.add_argument("--agent", required=True, help="agent checkpoint directory")
    s.add_argument("--output", help="dataset path (default OUT/unsup_demos.jsonl)")
    s.set_defaults(func=cmd_collect_unsup)

    s = sub.add_parser("train-offline", parents=[common], help="fit all models on a dataset")
    s.add_argument("--dataset", required=True)
    s.set_defaults(func=cmd_train_offline)

    s = sub.add_parser("run-online", parents=[common], help="online MPC episodes")
    s.add_argument("--models", help="checkpoint directory from train-offline")
    s.add_argument("--dataset", help="offline dataset the models were trained on")
    s.add_argument("--episodes", type=int, help="online.n_episodes (default 50)")
    s.add_argument("--no-forgetting", action="store_true", help="disable optimistic forgetting")
    s.add_argument("--resume", action="store_true", help="continue from OUT/online_checkpoint")
    s.set_defaults(func=cmd_run_online)

    s = sub.add_parser("export-heatmaps", parents=[common], help="value/constraint/safe/goal grids")
    s.add_argument("--models", required=True)
    s.add_argument("--resolution", type=_resolution, default=(100, 75), help="NXxNY (default 100x75)")
    s.set_defaults(func=cmd_export_heatmaps)

    s = sub.add_parser("eval", parents=[common], help="planner episodes without model updates")
    s.add_argument("--models", required=True)
    s.add_argument("--episodes", type=int, default=10)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run-online" and not args.resume and not (args.models and args.dataset):
        print("run-online: --models and --dataset are required unless --resume", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = _load_config(args)
        return args.func(args, cfg)
    except cfgmod.ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetFormatError, TrainingRefused, DataError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CollectionError, demos.DemoGenerationError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN
    except Exception as exc:  # noqa: BLE001 - the exit-code contract covers everything else
        log.exception("run failed")
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
