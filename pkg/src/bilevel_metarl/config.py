"""Experiment configuration: INI sections with a JSON mirror and dotted overrides."""

from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Optional, Tuple

from .meta import FIXED, FIXED_CLIP, THEOREM
from .tasks import PRESETS


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> Optional[float]:
    t = text.strip().lower()
    return None if t in ("", "none", "auto") else float(t)


def _opt_int(text: str) -> Optional[int]:
    t = text.strip().lower()
    return None if t in ("", "none", "auto") else int(t)


def _list(conv):
    def parse(text: str):
        return tuple(conv(x.strip()) for x in text.split(",") if x.strip())
    return parse


def _fmt_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt_value(x) for x in v)
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def _f(default, parse):
    return field(default=default, metadata={"parse": parse})


@dataclass(frozen=True)
class TaskSection:
    presets: Tuple[str, ...] = _f(("high", "low"), _list(str))
    n_tasks: int = _f(20, int)
    width: int = _f(4, int)
    height: int = _f(4, int)
    slip_prob: float = _f(0.0, float)
    goal_reward: float = _f(1.0, float)
    hole_reward: float = _f(-1.0, float)
    gamma: float = _f(0.8, float)
    rho_mix: float = _f(0.05, float)

    def validate(self):
        for p in self.presets:
            if p not in PRESETS:
                raise ConfigError(f"task.presets: unknown preset {p!r}; choose from {sorted(PRESETS)}")
        if not self.presets:
            raise ConfigError("task.presets: at least one preset is required")
        if self.n_tasks < 1:
            raise ConfigError("task.n_tasks: must be >= 1")
        if not 0 < self.gamma < 1:
            raise ConfigError("task.gamma: must lie in (0, 1)")
        if not 0 <= self.rho_mix <= 1:
            raise ConfigError("task.rho_mix: must lie in [0, 1]")
        if not 0 <= self.slip_prob <= 1:
            raise ConfigError("task.slip_prob: must lie in [0, 1]")
        if self.width * self.height < 2:
            raise ConfigError("task.width: grid needs at least two cells")


@dataclass(frozen=True)
class AdaptSection:
    metrics: Tuple[int, ...] = _f((1, 2, 3), _list(int))
    # none: the practical per-preset value
    lam: Optional[float] = _f(None, _opt_float)
    q_mode: str = _f("exact", str)
    n_rollouts: int = _f(10_000, int)
    horizon: Optional[int] = _f(None, _opt_int)
    inner_tol: float = _f(1e-10, float)
    strict: bool = _f(False, _bool)

    def validate(self):
        if not self.metrics or any(m not in (1, 2, 3) for m in self.metrics):
            raise ConfigError("adapt.metrics: entries must be 1, 2 or 3")
        if self.lam is not None and not self.lam > 0:
            raise ConfigError("adapt.lam: must be positive")
        if self.q_mode not in ("exact", "mc"):
            raise ConfigError("adapt.q_mode: must be 'exact' or 'mc'")
        if self.n_rollouts < 1:
            raise ConfigError("adapt.n_rollouts: must be >= 1")
        if not self.inner_tol > 0:
            raise ConfigError("adapt.inner_tol: must be positive")


@dataclass(frozen=True)
class MetaSection:
    iterations: int = _f(500, int)
    step_rule: str = _f(FIXED, str)
    alpha: float = _f(1.0, float)
    clip_norm: float = _f(math.inf, float)
    batch_size: int = _f(5, int)
    n_seeds: int = _f(3, int)
    checkpoint_every: int = _f(100, int)
    # also train the one-step policy-gradient baseline
    baseline: bool = _f(True, _bool)

    def validate(self):
        if self.iterations < 1:
            raise ConfigError("meta.iterations: must be >= 1")
        if self.step_rule not in (FIXED, FIXED_CLIP, THEOREM):
            raise ConfigError(f"meta.step_rule: must be one of {FIXED}, {FIXED_CLIP}, {THEOREM}")
        if not self.alpha > 0:
            raise ConfigError("meta.alpha: must be positive")
        if not self.clip_norm > 0:
            raise ConfigError("meta.clip_norm: must be positive")
        if self.batch_size < 1:
            raise ConfigError("meta.batch_size: must be >= 1")
        if self.n_seeds < 1:
            raise ConfigError("meta.n_seeds: must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("meta.checkpoint_every: must be >= 0")


@dataclass(frozen=True)
class AnalysisSection:
    tol: float = _f(1e-6, float)
    k_max: int = _f(5, int)
    logit_cap: float = _f(30.0, float)

    def validate(self):
        if not self.tol > 0:
            raise ConfigError("analysis.tol: must be positive")
        if self.k_max < 1:
            raise ConfigError("analysis.k_max: must be >= 1")
        if not self.logit_cap > 0:
            raise ConfigError("analysis.logit_cap: must be positive")


@dataclass(frozen=True)
class RunSection:
    out: str = _f("runs", str)
    seed: int = _f(0, int)
    # wall-clock column in trace CSVs; off keeps repeated runs byte-identical
    timing: bool = _f(False, _bool)
    figures: bool = _f(True, _bool)

    def validate(self):
        if self.seed < 0:
            raise ConfigError("run.seed: must be >= 0")


SECTIONS = {"task": TaskSection, "adapt": AdaptSection, "meta": MetaSection,
            "analysis": AnalysisSection, "run": RunSection}


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskSection = field(default_factory=TaskSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    meta: MetaSection = field(default_factory=MetaSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self) -> "ExperimentConfig":
        for name in SECTIONS:
            getattr(self, name).validate()
        return self

    def to_json(self) -> dict:
        def plain(v):
            if isinstance(v, tuple):
                return list(v)
            if isinstance(v, float) and math.isinf(v):
                return "inf" if v > 0 else "-inf"
            return v
        return {name: {k: plain(v) for k, v in asdict(getattr(self, name)).items()}
                for name in SECTIONS}

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for k, v in asdict(getattr(self, name)).items():
                lines.append(f"{k} = {_fmt_value(v)}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True,
                                         default=str).encode()).hexdigest()

    def with_overrides(self, overrides: Iterable[str]) -> "ExperimentConfig":
        """Apply `section.key=value` strings."""
        cfg = self
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"{item}: override must look like section.key=value")
            path, value = item.split("=", 1)
            if "." not in path:
                raise ConfigError(f"{path}: override key must be section.key")
            section, key = path.strip().split(".", 1)
            cfg = cfg._set(section, key, value)
        return cfg

    def _set(self, section: str, key: str, value) -> "ExperimentConfig":
        if section not in SECTIONS:
            raise ConfigError(f"{section}: unknown section; choose from {list(SECTIONS)}")
        sec = getattr(self, section)
        spec = {f.name: f for f in fields(sec)}
        if key not in spec:
            raise ConfigError(f"{section}.{key}: unknown key; choose from {sorted(spec)}")
        try:
            parsed = _coerce(spec[key], value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}.{key}: {exc}") from None
        return replace(self, **{section: replace(sec, **{key: parsed})})


def _coerce(f, value):
    parse = f.metadata["parse"]
    if isinstance(value, str):
        return parse(value)
    if isinstance(value, (list, tuple)):
        return parse(",".join(str(x) for x in value))
    if value is None:
        return parse("none")
    if isinstance(value, bool):
        return parse("true" if value else "false")
    return parse(str(value))


def from_mapping(doc: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for section, body in doc.items():
        if not isinstance(body, dict):
            raise ConfigError(f"{section}: expected a table of key/value pairs")
        for key, value in body.items():
            cfg = cfg._set(section, key, value)
    return cfg


def load_config(path=None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Read an .ini (or .json mirror) file, apply overrides and validate."""
    cfg = ExperimentConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config: file not found: {p}")
        if p.suffix.lower() == ".json":
            try:
                cfg = from_mapping(json.loads(p.read_text()))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config: invalid JSON ({exc})") from None
        else:
            parser = configparser.ConfigParser(interpolation=None)
            try:
                parser.read_string(p.read_text(), source=str(p))
            except configparser.Error as exc:
                raise ConfigError(f"config: {exc}") from None
            cfg = from_mapping({s: dict(parser.items(s)) for s in parser.sections()})
    return cfg.with_overrides(overrides).validate()
