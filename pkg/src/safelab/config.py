"""Run configuration: one INI file with a section per module.

Dataclass defaults are the reference hyperparameters; :func:`desk_preset`
shrinks networks and search budgets so a full experiment fits a single CPU.

The config hash is a short SHA-256 of the canonical INI text and is written
into every output file. The model hash covers only the sections that decide
what a checkpoint contains (run seed/mode, env, models) and is what
``run-online`` checks before reusing checkpoints.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from safelab.models import ModelConfig
from safelab.planner import CemConfig
from safelab.safe_loop import ForgettingConfig
from safelab.unsup.sac import SacConfig
from safelab.unsup.skills import SmmConfig

MODES = ("controller", "semi_supervised", "unsupervised")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass
class RunSection:
    env: str = "spb"
    seed: int = 0
    mode: str = "controller"
    n_gr: int = 100
    n_cv: int = 100
    noise_std: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.n_gr < 0 or self.n_cv < 0:
            raise ValueError("demo counts must be >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


@dataclass
class OnlineSection:
    n_episodes: int = 50
    update_steps: int = 200
    checkpoint_every: int = 10
    heatmap_every: int = 25
    area_nx: int = 50
    area_ny: int = 38
    heatmap_nx: int = 100
    heatmap_ny: int = 75

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < (0 if f.name == "n_episodes" else 1):
                raise ValueError(f"{f.name} out of range")


SECTIONS = {
    "run": RunSection,
    "models": ModelConfig,
    "planner": CemConfig,
    "forgetting": ForgettingConfig,
    "online": OnlineSection,
    "smm": SmmConfig,
    "sac": SacConfig,
}
MODEL_SECTIONS = ("run", "models")


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    models: ModelConfig = field(default_factory=ModelConfig)
    planner: CemConfig = field(default_factory=CemConfig)
    forgetting: ForgettingConfig = field(default_factory=ForgettingConfig)
    online: OnlineSection = field(default_factory=OnlineSection)
    smm: SmmConfig = field(default_factory=SmmConfig)
    sac: SacConfig = field(default_factory=SacConfig)

    def env_config(self):
        from safelab.env import make_config
        return make_config(self.run.env, noise_std=self.run.noise_std)

    def cem(self) -> CemConfig:
        """Planner config with action bounds taken from the environment."""
        return replace(self.planner, a_max=self.env_config().a_max)


# --- text encoding ------------------------------------------------------------------------

def _encode(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_encode(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _decode(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, tuple):
            if not text:
                return ()
            proto = default[0] if default else 0
            return tuple(_decode(t, proto, key) for t in text.split(","))
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None


def _section_text(name: str, obj) -> list[str]:
    lines = [f"[{name}]"]
    lines.extend(f"{f.name} = {_encode(getattr(obj, f.name))}" for f in fields(obj))
    return lines


def dumps(cfg: RunConfig, sections=None) -> str:
    lines: list[str] = []
    for name in sections or SECTIONS:
        lines.extend(_section_text(name, getattr(cfg, name)))
        lines.append("")
    return "\n".join(lines)


def _build(name: str, values: dict[str, str], base):
    cls = SECTIONS[name]
    known = {f.name: getattr(base, f.name) for f in fields(cls)}
    kw = dict(known)
    for key, text in values.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
        kw[key] = _decode(text, known[key], f"{name}.{key}")
    try:
        return cls(**kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(name, str(exc)) from None


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", str(exc).splitlines()[0]) from None
    base = base or RunConfig()
    parts = {}
    for name in SECTIONS:
        values = dict(parser[name]) if parser.has_section(name) else {}
        parts[name] = _build(name, values, getattr(base, name))
    for extra in parser.sections():
        if extra not in SECTIONS:
            raise ConfigError(extra, "unknown section")
    return RunConfig(**parts)


def load(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    return loads(Path(path).read_text(), base)


def save(cfg: RunConfig, path: str | Path) -> None:
    from safelab.dataset import atomic_write_text
    atomic_write_text(path, dumps(cfg))


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings."""
    grouped: dict[str, dict[str, str]] = {}
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(item, "override must look like section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")
        grouped.setdefault(section, {})[key.strip()] = value
    parts = {name: getattr(cfg, name) for name in SECTIONS}
    for section, values in grouped.items():
        parts[section] = _build(section, values, parts[section])
    return RunConfig(**parts)


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def config_hash(cfg: RunConfig) -> str:
    return _digest(dumps(cfg))


def model_hash(cfg: RunConfig) -> str:
    return _digest(dumps(cfg, MODEL_SECTIONS))


# --- presets -----------------------------------------------------------------------------

def desk_preset(cfg: RunConfig | None = None) -> RunConfig:
    """Single-CPU budgets: narrower networks, fewer epochs, a smaller CEM search."""
    cfg = cfg or RunConfig()
    return replace(
        cfg,
        models=replace(cfg.models, dyn_hidden=(64, 64), value_hidden=(64, 64),
                       classifier_hidden=(64, 64), dyn_epochs=20, value_epochs=20,
                       safe_epochs=20, classifier_epochs=20, online_steps=100),
        planner=replace(cfg.planner, n_candidates=200, n_elite=20, n_iterations=3,
                        n_particles=5),
        online=replace(cfg.online, update_steps=100),
        smm=replace(cfg.smm, n_pretrain_steps=300_000),
        sac=replace(cfg.sac, hidden=(64, 64), batch_size=128),
    )
