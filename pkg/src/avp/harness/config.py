"""Experiment configuration: one ``key = value`` text file with dotted sections.

Sections are ``sim``, ``camera``, ``supervision``, ``render``, ``train`` and
``experiment``. Values are Python literals (numbers, booleans, tuples, quoted
strings); anything that does not parse as a literal is taken as a bare string.
Blank lines and ``#`` comments are ignored. Every key has a default, so an
empty file is a valid config.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..errors import AVPError, ConfigError
from ..render import RenderConfig
from ..sim import SimConfig, default_camera
from ..supervision import SupervisionConfig
from ..learn.model import TrainConfig


@dataclass(frozen=True)
class CameraConfig:
    distance: float = 0.5
    elevation_deg: float = 45.0


@dataclass(frozen=True)
class Counts:
    train_episodes: int = 400
    eval_tasks: int = 50
    seeds: tuple = (0, 1, 2)
    data_seed: int = 0
    # episodes per dataset shard
    shard_episodes: int = 25
    # worker processes for evaluation rollouts
    workers: int = 1
    out_dir: str = "avp-out"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.train_episodes < 0 or self.eval_tasks < 0:
            raise ConfigError("episode and task counts must be >= 0")
        if self.shard_episodes < 1 or self.workers < 1:
            raise ConfigError("shard_episodes and workers must be >= 1")


SECTIONS = {
    "sim": SimConfig,
    "camera": CameraConfig,
    "supervision": SupervisionConfig,
    "render": RenderConfig,
    "train": TrainConfig,
    "experiment": Counts,
}
# SimConfig's camera is derived from the camera section, never set directly
_HIDDEN = {("sim", "camera")}


@dataclass(frozen=True)
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    supervision: SupervisionConfig = field(default_factory=SupervisionConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: Counts = field(default_factory=Counts)

    @property
    def out_dir(self) -> Path:
        return Path(self.experiment.out_dir)

    def with_section(self, name: str, **changes) -> ExperimentConfig:
        cfg = replace(self, **{name: replace(getattr(self, name), **changes)})
        return cfg._attach_camera() if name in ("camera", "sim") else cfg

    def _attach_camera(self) -> ExperimentConfig:
        cam = default_camera(self.sim.board_center, self.camera.distance, self.camera.elevation_deg)
        return replace(self, sim=replace(self.sim, camera=cam))

    def echo(self) -> dict:
        """Resolved configuration as plain JSON-compatible data."""
        out = {}
        for name in SECTIONS:
            sec = getattr(self, name)
            out[name] = {
                f.name: _plain(getattr(sec, f.name)) for f in fields(sec) if (name, f.name) not in _HIDDEN
            }
        return out

    def text(self) -> str:
        """The resolved configuration in the file format :func:`parse_config` reads."""
        lines = []
        for name, values in self.echo().items():
            for key, value in values.items():
                lines.append(f"{name}.{key} = {_literal(value)}")
        return "\n".join(lines) + "\n"


def _plain(v):
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v]
    return v


def _literal(v) -> str:
    if isinstance(v, list):
        return "(" + ", ".join(_literal(x) for x in v) + ("," if len(v) == 1 else "") + ")"
    return repr(v)


def _coerce(section: str, key: str, value, default):
    where = f"{section}.{key}"
    if isinstance(default, tuple):
        if isinstance(value, (int, float, str)):
            value = (value,)
        if not isinstance(value, (tuple, list)):
            raise ConfigError(f"{where} expects a sequence, got {value!r}")
        if default and isinstance(default[0], tuple):
            return tuple(tuple(x) for x in value)
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} expects True or False, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} expects an integer, got {value!r}")
        return value
    if isinstance(default, float) or default is None:
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} expects a string, got {value!r}")
        return value
    return value


def _parse_value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _build(overrides: dict) -> ExperimentConfig:
    parts = {}
    for name, cls in SECTIONS.items():
        defaults = cls()
        known = {f.name: getattr(defaults, f.name) for f in fields(cls) if (name, f.name) not in _HIDDEN}
        given = overrides.get(name, {})
        for key in given:
            if key not in known:
                raise ConfigError(f"unknown key {name}.{key}")
        kwargs = {k: _coerce(name, k, v, known[k]) for k, v in given.items()}
        try:
            parts[name] = cls(**kwargs)
        except ConfigError:
            raise
        except (AVPError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid {name} section: {e}") from e
    return ExperimentConfig(**parts)._attach_camera()


def parse_config(text: str) -> ExperimentConfig:
    overrides: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip() if not _quoted_hash(raw) else raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (x.strip() for x in line.split("=", 1))
        if key.count(".") != 1:
            raise ConfigError(f"line {lineno}: key {key!r} must be 'section.name'")
        section, name = key.split(".")
        if section not in SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        if name in overrides.get(section, {}):
            raise ConfigError(f"line {lineno}: {key} given twice")
        overrides.setdefault(section, {})[name] = _parse_value(value)
    return _build(overrides)


def _quoted_hash(line: str) -> bool:
    # a '#' inside a quoted value is data, not a comment
    head = line.split("#", 1)[0]
    return head.count("'") % 2 == 1 or head.count('"') % 2 == 1


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


def config_from_echo(echo: dict) -> ExperimentConfig:
    """Inverse of :meth:`ExperimentConfig.echo`."""
    return _build({name: dict(values) for name, values in echo.items()})


def run_config(cfg: ExperimentConfig, mode: str, seed: int) -> ExperimentConfig:
    """The config of one training run: mode and seed fixed, and no prompt for the baseline."""
    cfg = cfg.with_section("train", mode=mode, seed=int(seed))
    if mode == "noprim":
        cfg = cfg.with_section("render", prompt_type="none")
    elif cfg.render.prompt_type == "none":
        raise ConfigError(f"mode {mode!r} needs a visual prompt type other than 'none'")
    return cfg


__all__ = [
    "CameraConfig",
    "Counts",
    "ExperimentConfig",
    "config_from_echo",
    "load_config",
    "parse_config",
    "run_config",
]
