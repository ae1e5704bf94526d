"""Online safe-set MPC with optimistic forgetting.

After offline training the agent plans every step with the CEM planner,
appends each finished episode to the replay store, fine-tunes all models on
the grown store and, at every window boundary, drops the window's online
episodes when their mean normalized return is below ``r_min``.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from safelab import seeding
from safelab.dataset import Dataset, atomic_write_text
from safelab.env import EnvConfig, EpisodeRecord, in_constraint, normalized_return, rollout
from safelab.models import ModelBundle, update_online
from safelab.planner import CemConfig, cem_plan

log = logging.getLogger(__name__)


@dataclass
class ForgettingConfig:
    n_forget: int = 25
    r_min: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if self.n_forget < 1:
            raise ValueError("n_forget must be >= 1")
        if not 0.0 <= self.r_min <= 1.0:
            raise ValueError("r_min must lie in [0, 1]")


@dataclass
class ReportRow:
    episode: int
    ret: float
    normalized: float
    reached_goal: bool
    violated: bool
    steps: int
    forget: bool
    dropped: int
    safe_area: float
    feasible_frac: float


@dataclass
class TrainReport:
    rows: list[ReportRow] = field(default_factory=list)
    config_hash: str = ""

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def n_goal(self) -> int:
        return sum(r.reached_goal for r in self.rows)

    @property
    def violation_rate(self) -> float:
        return sum(r.violated for r in self.rows) / len(self.rows) if self.rows else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# config_hash={self.config_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        names = [f.name for f in fields(ReportRow)]
        w.writerow(names)
        for row in self.rows:
            w.writerow([_fmt(getattr(row, n)) for n in names])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        atomic_write_text(path, self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "TrainReport":
        lines = text.splitlines()
        chash = ""
        if lines and lines[0].startswith("# config_hash="):
            chash = lines.pop(0).split("=", 1)[1]
        rows = []
        for rec in csv.DictReader(lines):
            rows.append(ReportRow(
                episode=int(rec["episode"]), ret=float(rec["ret"]),
                normalized=float(rec["normalized"]), reached_goal=rec["reached_goal"] == "1",
                violated=rec["violated"] == "1", steps=int(rec["steps"]),
                forget=rec["forget"] == "1", dropped=int(rec["dropped"]),
                safe_area=float(rec["safe_area"]), feasible_frac=float(rec["feasible_frac"])))
        return cls(rows, chash)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# --- forgetting ------------------------------------------------------------------------

def optimistic_forget(store: Dataset, window: list[EpisodeRecord], fcfg: ForgettingConfig,
                      horizon: int) -> int:
    """Drop the window's online episodes when their mean normalized return
    is below ``r_min``. Returns the number removed; the caller resets the window."""
    online = [ep for ep in window if ep.origin == "online"]
    if not online:
        return 0
    mean = float(np.mean([normalized_return(ep, horizon) for ep in online]))
    if mean >= fcfg.r_min:
        return 0
    present = {id(ep) for ep in store.episodes}
    return store.remove_online([ep for ep in online if id(ep) in present])


# --- safe-set statistics and heatmaps -------------------------------------------------------

def arena_grid(env: EnvConfig, resolution: tuple[int, int] = (100, 75)) -> np.ndarray:
    """Cell centres of an nx-by-ny grid over the arena, x varying fastest."""
    nx, ny = resolution
    w, h = env.arena
    xs = (np.arange(nx) + 0.5) * w / nx
    ys = (np.arange(ny) + 0.5) * h / ny
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def safe_set_area(bundle, env: EnvConfig, resolution: tuple[int, int] = (100, 75)) -> float:
    """Fraction of free-space cells whose centre has f_S >= 0.5."""
    grid = arena_grid(env, resolution)
    free = grid[~np.asarray(in_constraint(env, grid))]
    if len(free) == 0:
        return 0.0
    return float(np.mean(bundle.safe_fn(free) >= 0.5))


HEATMAPS = {"value": "value_fn", "constraint": "constraint_fn",
            "safe_set": "safe_fn", "goal": "goal_fn"}


def heatmap_csv(bundle, env: EnvConfig, which: str, resolution=(100, 75),
                config_hash: str = "") -> str:
    grid = arena_grid(env, resolution)
    vals = getattr(bundle, HEATMAPS[which])(grid)
    lines = [f"# config_hash={config_hash}", "x,y,value"]
    lines.extend(f"{x!r},{y!r},{float(v)!r}" for (x, y), v in zip(grid.tolist(), vals))
    return "\n".join(lines) + "\n"


def export_heatmaps(bundle, env: EnvConfig, resolution, directory: str | Path,
                    config_hash: str = "", prefix: str = "") -> list[Path]:
    directory = Path(directory)
    out = []
    for which in HEATMAPS:
        path = directory / f"{prefix}heatmap_{which}.csv"
        atomic_write_text(path, heatmap_csv(bundle, env, which, resolution, config_hash))
        out.append(path)
    return out


def read_heatmap(path: str | Path) -> np.ndarray:
    """(n, 3) array of x, y, value."""
    return np.loadtxt(path, delimiter=",", comments="#", skiprows=2, ndmin=2)


# --- online loop ---------------------------------------------------------------------------

@dataclass
class OnlineState:
    """What must survive a restart besides the bundle and the store."""

    next_episode: int = 0
    window: list[int] = field(default_factory=list)  # store indices of the open window


def plan_episode(env: EnvConfig, bundle: ModelBundle, cem: CemConfig, seed: int,
                 episode: int) -> tuple[EpisodeRecord, float]:
    """One MPC episode. Returns (episode, fraction of steps with a feasible plan)."""
    feasible = []

    def policy(t, s):
        res = cem_plan(bundle, s, cem, seeding.child_seed(seed, "plan", episode, t))
        feasible.append(res.feasible)
        return res.actions[0]

    ep = rollout(env, policy, seeding.child_seed(seed, "online", episode), origin="online")
    return ep, float(np.mean(feasible)) if feasible else 0.0


def run_online(env: EnvConfig, bundle: ModelBundle, store: Dataset, cem: CemConfig,
               fcfg: ForgettingConfig, n_episodes: int, seed: int,
               state: OnlineState | None = None, update_steps: int | None = None,
               area_resolution=(50, 38), on_episode=None,
               report: TrainReport | None = None) -> TrainReport:
    """Run ``n_episodes`` online episodes, mutating ``bundle`` and ``store``.

    ``on_episode(report, state)`` is called after every episode (used for
    checkpointing). A failure mid-run re-raises after the partial report has
    been handed to ``on_episode`` for the completed episodes.
    """
    state = state if state is not None else OnlineState()
    report = report if report is not None else TrainReport()
    window = [store.episodes[i] for i in state.window]
    for _ in range(n_episodes):
        i = state.next_episode
        ep, feas = plan_episode(env, bundle, cem, seed, i)
        store.add(ep)
        window.append(ep)
        update_online(bundle, store, seeding.rng(seed, "update", i), update_steps)
        forget, dropped = False, 0
        if fcfg.enabled and (i + 1) % fcfg.n_forget == 0:
            forget = True
            dropped = optimistic_forget(store, window, fcfg, env.horizon)
            window = []
        elif not fcfg.enabled and len(window) >= fcfg.n_forget:
            window = []
        row = ReportRow(
            episode=i, ret=ep.total_return, normalized=normalized_return(ep, env.horizon),
            reached_goal=ep.reached_goal, violated=ep.violated, steps=len(ep),
            forget=forget, dropped=dropped,
            safe_area=safe_set_area(bundle, env, area_resolution), feasible_frac=feas)
        report.rows.append(row)
        log.info("episode %d return %.0f goal %s violated %s area %.3f dropped %d",
                 i, row.ret, row.reached_goal, row.violated, row.safe_area, dropped)
        state.next_episode = i + 1
        ids = {id(e): k for k, e in enumerate(store.episodes)}
        state.window = [ids[id(e)] for e in window if id(e) in ids]
        if on_episode is not None:
            on_episode(report, state)
    return report


def state_to_dict(state: OnlineState) -> dict:
    return asdict(state)


def state_from_dict(d: dict) -> OnlineState:
    return OnlineState(int(d["next_episode"]), [int(i) for i in d["window"]])
