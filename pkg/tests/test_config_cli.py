"""Config round trips, exit codes and an end-to-end CLI run on tiny budgets."""

import csv
import json
from pathlib import Path

import pytest

from safelab import config as cfgmod
from safelab.approx import load_nets
from safelab import dataset as dsio
from safelab.cli import main

TINY = [
    "models.dyn_members=2", "models.value_members=2",
    "models.dyn_hidden=16,16", "models.value_hidden=16,16", "models.classifier_hidden=16,16",
    "models.dyn_epochs=1", "models.value_epochs=1", "models.safe_epochs=1",
    "models.classifier_epochs=1", "models.online_steps=2",
    "planner.n_candidates=20", "planner.n_elite=4", "planner.n_iterations=1",
    "planner.n_particles=2",
    "online.update_steps=2", "online.checkpoint_every=1", "online.heatmap_every=2",
    "online.area_nx=10", "online.area_ny=8", "online.heatmap_nx=10", "online.heatmap_ny=8",
    "forgetting.n_forget=2",
    "run.n_gr=5", "run.n_cv=5",
]


def _sets(extra=()):
    out = []
    for item in list(TINY) + list(extra):
        out += ["--set", item]
    return out


def _hash_line(path: Path) -> str:
    if path.suffix == ".npn":
        return load_nets(path)[1].get("config_hash", "")
    first = path.read_text().splitlines()[0]
    if path.suffix == ".json":
        return json.loads(path.read_text()).get("config_hash", "")
    if path.suffix == ".jsonl":
        return json.loads(first).get("config_hash", "")
    assert first.startswith("# config_hash="), path
    return first.split("=", 1)[1].strip()


# --- config -------------------------------------------------------------------------------

def test_config_round_trip_and_hash():
    cfg = cfgmod.desk_preset()
    back = cfgmod.loads(cfgmod.dumps(cfg))
    assert back == cfg
    assert cfgmod.config_hash(back) == cfgmod.config_hash(cfg)
    assert cfgmod.config_hash(cfg) != cfgmod.config_hash(cfgmod.RunConfig())


def test_overrides_apply_and_model_hash_scope():
    cfg = cfgmod.apply_overrides(cfgmod.RunConfig(), ["planner.horizon=7", "models.dyn_hidden=8,8"])
    assert cfg.planner.horizon == 7 and cfg.models.dyn_hidden == (8, 8)
    planner_only = cfgmod.apply_overrides(cfgmod.RunConfig(), ["planner.horizon=7"])
    assert cfgmod.model_hash(planner_only) == cfgmod.model_hash(cfgmod.RunConfig())
    assert cfgmod.model_hash(cfg) != cfgmod.model_hash(cfgmod.RunConfig())


@pytest.mark.parametrize("item", ["planner.horizon", "nosuch.key=1", "planner.nosuch=1",
                                  "planner.horizon=abc", "planner.horizon=0", "run.mode=other"])
def test_bad_overrides_raise(item):
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.apply_overrides(cfgmod.RunConfig(), [item])


def test_unknown_section_in_file_raises():
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.loads("[bogus]\nx = 1\n")


def test_boolean_and_tuple_decoding():
    cfg = cfgmod.loads("[forgetting]\nenabled = off\n[sac]\nhidden = 32, 16\n")
    assert cfg.forgetting.enabled is False and cfg.sac.hidden == (32, 16)


# --- exit codes ---------------------------------------------------------------------------

def test_usage_errors_exit_1(tmp_path):
    assert main([]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["gen-demos", "--out", str(tmp_path), "--set", "planner.horizon=0"]) == 1
    assert main(["run-online", "--out", str(tmp_path)]) == 1
    assert main(["export-heatmaps", "--models", str(tmp_path), "--resolution", "ten"]) == 1
    assert main(["gen-demos", "--out", str(tmp_path), "--mode", "unsupervised"]) == 1


def test_missing_data_exits_2(tmp_path):
    assert main(["train-offline", "--out", str(tmp_path), "--dataset", str(tmp_path / "none.jsonl")]) == 2
    assert main(["run-online", "--out", str(tmp_path), "--resume"]) == 2
    assert main(["eval", "--out", str(tmp_path), "--models", str(tmp_path / "none")]) == 2
    bad = tmp_path / "bad.jsonl"
    bad.write_text("not json\n")
    assert main(["train-offline", "--out", str(tmp_path), "--dataset", str(bad)]) == 2


def test_train_offline_refuses_without_goal_demos(tmp_path):
    assert main(["gen-demos", "--out", str(tmp_path), *_sets(["run.n_gr=0"])]) == 0
    code = main(["train-offline", "--out", str(tmp_path / "m"),
                 "--dataset", str(tmp_path / "demos.jsonl"), *_sets()])
    assert code == 2


def test_collect_with_empty_goal_skills_exits_3(tmp_path):
    agent = tmp_path / "agent_run"
    small = ["--set", "sac.hidden=8,8", "--set", "sac.batch_size=8", "--set", "sac.start_steps=10",
             "--set", "smm.disc_hidden=8,8", "--set", "smm.n_samples=2", "--set", "smm.r_min=0"]
    assert main(["train-unsup", "--out", str(agent), "--mode", "unsupervised",
                 "--steps", "30", *small]) == 0
    code = main(["collect-unsup", "--out", str(tmp_path / "c"), "--mode", "unsupervised",
                 "--agent", str(agent / "agent"), *small])
    assert code == 3
    assert (tmp_path / "c" / "skill_summary.csv").exists()
    assert main(["collect-unsup", "--out", str(tmp_path / "c"), "--mode", "controller",
                 "--agent", str(agent / "agent"), *small]) == 1


# --- end to end ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    demos_dir, off, on = root / "demos", root / "offline", root / "online"
    assert main(["gen-demos", "--out", str(demos_dir), *_sets()]) == 0
    assert main(["train-offline", "--out", str(off), "--dataset", str(demos_dir / "demos.jsonl"),
                 *_sets()]) == 0
    assert main(["run-online", "--out", str(on), "--models", str(off / "models"),
                 "--dataset", str(demos_dir / "demos.jsonl"), "--episodes", "2", *_sets()]) == 0
    return root


def test_gen_demos_counts(pipeline):
    ds, header = dsio.load(pipeline / "demos" / "demos.jsonl")
    counts = ds.counts()
    assert counts["offline_gr"] == 5 and counts["offline_cv"] == 5 and len(ds) == 10


def test_train_offline_outputs(pipeline):
    off = pipeline / "offline"
    for kind in ("value", "constraint", "safe_set", "goal"):
        assert (off / f"offline_heatmap_{kind}.csv").exists()
    assert (off / "models" / "manifest.json").exists()
    rows = list(csv.reader(l for l in (off / "offline_losses.csv").read_text().splitlines()
                           if not l.startswith("#")))
    assert rows[0] == ["model", "step", "loss"] and len(rows) > 1


def test_train_offline_is_bit_identical(pipeline, tmp_path):
    assert main(["train-offline", "--out", str(tmp_path),
                 "--dataset", str(pipeline / "demos" / "demos.jsonl"), *_sets()]) == 0
    first = pipeline / "offline" / "models"
    for f in sorted(first.iterdir()):
        assert (tmp_path / "models" / f.name).read_bytes() == f.read_bytes(), f.name


def test_run_online_report_rows(pipeline):
    text = (pipeline / "online" / "online_report.csv").read_text()
    lines = [l for l in text.splitlines() if l and not l.startswith("#")]
    assert len(lines) == 1 + 2


def test_resume_continues_numbering(pipeline, tmp_path):
    import shutil
    on = tmp_path / "online"
    shutil.copytree(pipeline / "online", on)
    assert main(["run-online", "--out", str(on), "--resume", "--episodes", "3", *_sets()]) == 0
    rows = list(csv.DictReader(l for l in (on / "online_report.csv").read_text().splitlines()
                               if not l.startswith("#")))
    assert [int(r["episode"]) for r in rows] == [0, 1, 2]
    state = json.loads((on / "online_checkpoint" / "state.json").read_text())
    assert state["next_episode"] == 3


def test_no_forgetting_flag_and_model_hash_mismatch(pipeline, tmp_path):
    demos_path = pipeline / "demos" / "demos.jsonl"
    models = pipeline / "offline" / "models"
    assert main(["run-online", "--out", str(tmp_path / "nf"), "--models", str(models),
                 "--dataset", str(demos_path), "--episodes", "2", "--no-forgetting", *_sets()]) == 0
    ini = (tmp_path / "nf" / "run_config.ini").read_text()
    assert "enabled = false" in ini
    code = main(["run-online", "--out", str(tmp_path / "mm"), "--models", str(models),
                 "--dataset", str(demos_path), "--episodes", "1",
                 *_sets(["models.dyn_hidden=8,8"])])
    assert code == 2


def test_export_and_eval(pipeline, tmp_path):
    models = pipeline / "offline" / "models"
    assert main(["export-heatmaps", "--out", str(tmp_path), "--models", str(models),
                 "--resolution", "6x4", *_sets()]) == 0
    value = [l for l in (tmp_path / "heatmap_value.csv").read_text().splitlines()
             if l and not l.startswith("#")]
    assert len(value) == 1 + 6 * 4
    assert main(["eval", "--out", str(tmp_path), "--models", str(models), "--episodes", "1",
                 *_sets()]) == 0
    assert (tmp_path / "eval.csv").exists()


def test_config_hash_in_every_output(pipeline):
    for run in ("demos", "offline", "online"):
        d = pipeline / run
        want = _hash_line(d / "run_config.ini")
        files = [p for p in d.rglob("*") if p.is_file() and p.suffix in (".csv", ".jsonl", ".json", ".ini", ".npn")]
        assert files
        for p in files:
            assert _hash_line(p) == want, p
