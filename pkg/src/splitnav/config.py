"""Experiment configuration: a typed view over an INI file.

The file is the source of truth; ``--set section.key=value`` overrides land
on top before validation.  Writing the resolved configuration back out is
lossless for floats (shortest round-trip repr), so a saved snapshot re-runs
identically.
"""
from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field, fields
from typing import get_args, get_origin

from .depthnet import GEOMETRIES, StudentSpec
from .errors import ConfigurationError

ENV_OUTPUT = "SPLITNAV_OUTPUT"


@dataclass
class ExperimentSection:
    root_seed: int = 20240811
    geometry: str = "desk"


@dataclass
class DatasetSection:
    train: int = 480
    val: int = 60
    test: int = 60


@dataclass
class TeacherSection:
    epochs: int = 12
    lr: float = 1e-3
    batch_size: int = 16
    patience: int = 5


@dataclass
class StudentsSection:
    specs: str = "bottleneck:v1:12, baseline:32"
    head_epochs: int = 10
    tail_epochs: int = 6
    lr: float = 1e-3
    batch_size: int = 16
    patience: int = 5


@dataclass
class NavSection:
    total_steps: int = 30000
    warmup_steps: int = 1000
    batch_size: int = 128
    lr: float = 1e-3
    eval_every: int = 5000
    eval_episodes: int = 8
    exploration_noise: float = 0.1


@dataclass
class GateSection:
    total_steps: int = 12000
    warmup_steps: int = 1000
    alpha5: float = 0.05
    beta: float = 0.8


@dataclass
class EvalSection:
    episodes: int = 40
    level_weights: str = "0.4, 0.4, 0.2"
    cell_m: float = 4.0


@dataclass
class WireSection:
    pool_h: int = 6
    pool_w: int = 8
    rate_bps: float = 1e6
    latency_s: float = 0.0


@dataclass
class Config:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    students: StudentsSection = field(default_factory=StudentsSection)
    nav: NavSection = field(default_factory=NavSection)
    gate: GateSection = field(default_factory=GateSection)
    eval: EvalSection = field(default_factory=EvalSection)
    wire: WireSection = field(default_factory=WireSection)

    # -- derived views -------------------------------------------------------

    def geometry(self):
        try:
            return GEOMETRIES[self.experiment.geometry]()
        except KeyError:
            raise ConfigurationError(
                f"unknown geometry {self.experiment.geometry!r}; "
                f"choose from {sorted(GEOMETRIES)}") from None

    def student_specs(self) -> list[StudentSpec]:
        return [parse_student_spec(part)
                for part in self.students.specs.split(",") if part.strip()]

    def level_weights(self) -> list[float]:
        try:
            weights = [float(w) for w in self.eval.level_weights.split(",")]
        except ValueError:
            raise ConfigurationError(
                f"bad level weights {self.eval.level_weights!r}") from None
        if not weights or any(w < 0 for w in weights) or sum(weights) <= 0:
            raise ConfigurationError("level weights must be non-negative, not all zero")
        return weights

    def pool_hw(self) -> tuple[int, int]:
        return (self.wire.pool_h, self.wire.pool_w)

    def validate(self) -> "Config":
        if self.dataset.train < 1 or self.dataset.val < 1 or self.dataset.test < 1:
            raise ConfigurationError("dataset split sizes must be positive")
        if not 0.0 < self.gate.beta <= 1.0:
            raise ConfigurationError("gate beta must lie in (0, 1]")
        if self.wire.pool_h < 1 or self.wire.pool_w < 1:
            raise ConfigurationError("pooling grid must be at least 1x1")
        self.geometry()
        specs = self.student_specs()
        if not specs:
            raise ConfigurationError("at least one student spec is required")
        self.level_weights()
        return self


def parse_student_spec(text: str) -> StudentSpec:
    """``baseline:32`` or ``bottleneck:v1:12``."""
    parts = [p.strip() for p in text.strip().split(":")]
    try:
        if parts[0] == "baseline" and len(parts) == 2:
            return StudentSpec("baseline", int(parts[1]))
        if parts[0] == "bottleneck" and len(parts) == 3:
            return StudentSpec("bottleneck", int(parts[2]), variant=parts[1])
    except ValueError:
        raise ConfigurationError(f"bad student spec {text!r}") from None
    raise ConfigurationError(f"bad student spec {text!r}")


# ---------------------------------------------------------------------------
# INI mapping


def _convert(raw: str, annotation, where: str):
    if annotation is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigurationError(f"{where}: {raw!r} is not an integer") from None
    if annotation is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigurationError(f"{where}: {raw!r} is not a number") from None
    if annotation is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{where}: {raw!r} is not a boolean")
    return raw


def _apply(cfg: Config, section: str, key: str, raw: str) -> None:
    where = f"{section}.{key}"
    sec = getattr(cfg, section, None)
    if sec is None or section not in {f.name for f in fields(cfg)}:
        raise ConfigurationError(f"unknown config section {section!r}")
    spec = {f.name: f for f in fields(sec)}.get(key)
    if spec is None:
        raise ConfigurationError(f"unknown config key {where!r}")
    annotation = spec.type if not isinstance(spec.type, str) else \
        {"int": int, "float": float, "str": str, "bool": bool}.get(spec.type, str)
    if get_origin(annotation) is not None:
        annotation = get_args(annotation)[0]
    setattr(sec, key, _convert(raw, annotation, where))


def load_config(path: str | None = None, overrides: list[str] | None = None) -> Config:
    """Defaults, then the INI file, then ``section.key=value`` overrides."""
    cfg = Config()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigurationError(f"config file not found: {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(cfg, section, key, raw)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigurationError(
                f"override {item!r} must look like section.key=value")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        _apply(cfg, section.strip(), key.strip(), value.strip())
    return cfg.validate()


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def config_to_ini(cfg: Config) -> str:
    parser = configparser.ConfigParser()
    for f in fields(cfg):
        sec = getattr(cfg, f.name)
        parser[f.name] = {sf.name: _format_value(getattr(sec, sf.name))
                          for sf in fields(sec)}
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def save_config(cfg: Config, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(config_to_ini(cfg))


def output_root(cli_value: str | None) -> str:
    """CLI flag wins, then the environment, then ./runs."""
    if cli_value:
        return cli_value
    return os.environ.get(ENV_OUTPUT, "runs")
