"""Partitioned episode store and its JSON-lines file format.

The same :class:`Dataset` object is the offline demonstration set and the
online replay store: episodes carry an origin tag (``offline_gr``,
``offline_cv``, ``online``) and only online episodes may be removed.

File format (one JSON object per line, format version 1)::

    {"type": "manifest", "format_version": 1, "env": "spb",
     "counts": {"offline_gr": 100, "offline_cv": 100, "online": 0},
     "config_hash": "..."}
    {"type": "episode", "origin": "offline_gr", "skill": null,
     "s": [[x, y], ...], "a": [[u, v], ...], "r": [...], "s_next": [[x, y], ...],
     "c": [false, ...], "done": [false, ..., true]}
    ...

Floats are written with ``repr`` precision so a load/save round trip is exact.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from safelab.env import ORIGINS, EpisodeRecord

FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed; ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class Batch:
    """Flattened transitions with per-row bookkeeping."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    constraints: np.ndarray
    dones: np.ndarray
    episode: np.ndarray  # index into Dataset.episodes
    step: np.ndarray  # time index inside its episode
    success: np.ndarray  # episode reached the goal

    def __len__(self) -> int:
        return len(self.rewards)

    def take(self, idx) -> "Batch":
        return Batch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


@dataclass
class Dataset:
    env_name: str = "spb"
    episodes: list[EpisodeRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.episodes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.env_name == other.env_name and self.episodes == other.episodes

    def add(self, ep: EpisodeRecord) -> None:
        self.episodes.append(ep)

    def extend(self, eps: Iterable[EpisodeRecord]) -> None:
        self.episodes.extend(eps)

    def partition(self, origin: str) -> list[EpisodeRecord]:
        return [ep for ep in self.episodes if ep.origin == origin]

    @property
    def gr(self) -> list[EpisodeRecord]:
        return self.partition("offline_gr")

    @property
    def constr(self) -> list[EpisodeRecord]:
        return self.partition("offline_cv")

    @property
    def online(self) -> list[EpisodeRecord]:
        return self.partition("online")

    def counts(self) -> dict[str, int]:
        return {o: len(self.partition(o)) for o in ORIGINS}

    @property
    def offline_size(self) -> int:
        return sum(ep.origin != "online" for ep in self.episodes)

    def n_transitions(self) -> int:
        return sum(len(ep) for ep in self.episodes)

    def remove_online(self, episodes: Iterable[EpisodeRecord]) -> int:
        """Drop the given online episodes (by identity). Offline ones are refused."""
        drop = {id(ep) for ep in episodes}
        for ep in self.episodes:
            if id(ep) in drop and ep.origin != "online":
                raise ValueError("offline episodes cannot be removed")
        before = len(self.episodes)
        self.episodes = [ep for ep in self.episodes if id(ep) not in drop]
        return before - len(self.episodes)

    def flatten(self, origins: Iterable[str] | None = None) -> Batch:
        keep = set(origins) if origins is not None else set(ORIGINS)
        picked = [(i, ep) for i, ep in enumerate(self.episodes) if ep.origin in keep]
        if not picked:
            empty2 = np.zeros((0, 2))
            return Batch(empty2, empty2.copy(), np.zeros(0), empty2.copy(),
                         np.zeros(0, bool), np.zeros(0, bool), np.zeros(0, int),
                         np.zeros(0, int), np.zeros(0, bool))
        cat = np.concatenate
        return Batch(
            states=cat([ep.states for _, ep in picked]),
            actions=cat([ep.actions for _, ep in picked]),
            rewards=cat([ep.rewards for _, ep in picked]),
            next_states=cat([ep.next_states for _, ep in picked]),
            constraints=cat([ep.constraints for _, ep in picked]),
            dones=cat([ep.dones for _, ep in picked]),
            episode=cat([np.full(len(ep), i) for i, ep in picked]),
            step=cat([np.arange(len(ep)) for _, ep in picked]),
            success=cat([np.full(len(ep), ep.reached_goal) for _, ep in picked]),
        )

    def all_states(self) -> np.ndarray:
        """Every visited state, including each episode's final state."""
        if not self.episodes:
            return np.zeros((0, 2))
        return np.concatenate([np.vstack([ep.states, ep.next_states[-1:]])
                               for ep in self.episodes])


# --- JSON lines ------------------------------------------------------------------

def _episode_to_json(ep: EpisodeRecord) -> dict:
    return {
        "type": "episode",
        "origin": ep.origin,
        "skill": ep.skill,
        "s": ep.states.tolist(),
        "a": ep.actions.tolist(),
        "r": ep.rewards.tolist(),
        "s_next": ep.next_states.tolist(),
        "c": ep.constraints.tolist(),
        "done": ep.dones.tolist(),
    }


def _episode_from_json(obj: dict) -> EpisodeRecord:
    n = len(obj["r"])
    if n == 0:
        raise ValueError("episode with no transitions")
    actions = obj["a"]
    return EpisodeRecord(
        states=np.array(obj["s"], dtype=float),
        actions=np.array(actions, dtype=float).reshape(n, -1),
        rewards=np.array(obj["r"], dtype=float),
        next_states=np.array(obj["s_next"], dtype=float),
        constraints=np.array(obj["c"], dtype=bool),
        dones=np.array(obj["done"], dtype=bool),
        origin=obj["origin"],
        skill=None if obj.get("skill") is None else int(obj["skill"]),
    )


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write-temp-then-rename so readers never see a half-written file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps(ds: Dataset, config_hash: str = "") -> str:
    manifest = {"type": "manifest", "format_version": FORMAT_VERSION,
                "env": ds.env_name, "counts": ds.counts(), "config_hash": config_hash}
    lines = [json.dumps(manifest)]
    lines.extend(json.dumps(_episode_to_json(ep)) for ep in ds.episodes)
    return "\n".join(lines) + "\n"


def save(ds: Dataset, path: str | Path, config_hash: str = "") -> None:
    atomic_write_text(path, dumps(ds, config_hash))


def loads(text: str) -> tuple[Dataset, dict]:
    """Parse a JSON-lines dataset; returns (dataset, manifest)."""
    manifest = None
    ds = Dataset()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"invalid JSON ({exc.msg})", lineno) from None
        kind = obj.get("type") if isinstance(obj, dict) else None
        if kind == "manifest":
            if manifest is not None:
                raise DatasetFormatError("duplicate manifest", lineno)
            if obj.get("format_version") != FORMAT_VERSION:
                raise DatasetFormatError(
                    f"unsupported format_version {obj.get('format_version')!r}", lineno)
            manifest = obj
            ds.env_name = obj.get("env", "spb")
        elif kind == "episode":
            try:
                ds.add(_episode_from_json(obj))
            except (KeyError, ValueError, TypeError) as exc:
                raise DatasetFormatError(f"bad episode record: {exc}", lineno) from None
        else:
            raise DatasetFormatError(f"unknown record type {kind!r}", lineno)
    if manifest is None:
        raise DatasetFormatError("missing manifest line")
    if manifest.get("counts") != ds.counts():
        raise DatasetFormatError(
            f"manifest counts {manifest.get('counts')} do not match body {ds.counts()}")
    return ds, manifest


def load(path: str | Path) -> tuple[Dataset, dict]:
    return loads(Path(path).read_text())
