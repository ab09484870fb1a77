"""Run configuration: ``key = value`` text with dotted sections.

Example::

    # comments start with '#'
    data.n = 2000
    model.channels = 64,128,256
    train.steps = 5000

Every key has a default. Unknown keys are rejected. Values given on the
command line override the file, which overrides the defaults.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple, Union, get_args, get_origin, get_type_hints

from .data import DataConfig
from .model import ARMS, ModelConfig
from .schedule import DEFAULT_BETA, DEFAULT_T
from .trainer import TrainConfig

PathLike = Union[str, os.PathLike]


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    n: int = 2000
    seed: int = 0
    image_size: int = 64
    radius: Tuple[int, int] = (10, 16)
    rotation: Tuple[int, int] = (-45, 45)
    scale: Tuple[float, float] = (0.6, 1.0)
    looseness: float = 1.2
    stripe_width: Tuple[int, int] = (4, 7)
    checker_cell: Tuple[int, int] = (5, 8)
    noise_amp: float = 12.0

    def data_config(self) -> DataConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(DataConfig)}
        return DataConfig(**kw)


@dataclass
class ScheduleSection:
    T: int = DEFAULT_T
    beta_start: float = DEFAULT_BETA[0]
    beta_end: float = DEFAULT_BETA[1]


@dataclass
class SampleSection:
    steps: int = 50
    cfg_scale: float = 7.5
    seed: int = 0
    mode: str = "ddim"
    batch_size: int = 16


@dataclass
class EvalSection:
    seeds: Tuple[int, ...] = (0, 1, 2)
    steps: int = 5000
    n_eval: int = 0  # 0 means the whole test split


@dataclass
class PathsSection:
    data: str = "data"
    out: str = "out"


@dataclass
class TrainSection:
    arm: str = "full"
    lr: float = 1e-4
    batch_size: int = 8
    steps: int = 5000
    freeze: Tuple[str, ...] = ()
    cond_drop_prob: float = 0.1
    seed: int = 0
    precision: str = "float32"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 1000


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def train_config(self) -> TrainConfig:
        kw = dataclasses.asdict(self.train)
        kw.pop("arm")
        kw.update(T=self.schedule.T, beta_start=self.schedule.beta_start, beta_end=self.schedule.beta_end)
        return TrainConfig(**kw)

    def model_config(self) -> ModelConfig:
        return dataclasses.replace(self.model, image_size=self.data.image_size)

    # -- text form ---------------------------------------------------------------

    def items(self) -> Iterable[Tuple[str, Any]]:
        for sec in fields(self):
            obj = getattr(self, sec.name)
            for f in fields(obj):
                yield f"{sec.name}.{f.name}", getattr(obj, f.name)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def set(self, key: str, raw: str) -> None:
        sec_name, _, name = key.partition(".")
        sec = getattr(self, sec_name, None) if sec_name in _sections() else None
        if sec is None or name not in {f.name for f in fields(sec)}:
            raise ConfigError(f"unknown config key {key!r}")
        hint = get_type_hints(type(sec))[name]
        try:
            setattr(sec, name, _parse(raw, hint))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None

    def validate(self) -> "RunConfig":
        """Re-run every section's own checks; raises ConfigError."""
        try:
            self.data.data_config()
            self.model = ModelConfig(**dataclasses.asdict(self.model_config()))
            self.train_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if self.sample.steps < 1 or self.sample.batch_size < 1:
            raise ConfigError("sample.steps and sample.batch_size must be >= 1")
        if self.sample.mode not in ("ddim", "ddpm"):
            raise ConfigError(f"sample.mode must be ddim or ddpm, got {self.sample.mode!r}")
        if self.train.arm not in ARMS:
            raise ConfigError(f"unknown arm {self.train.arm!r}; expected one of {', '.join(ARMS)}")
        if self.data.n < 1:
            raise ConfigError("data.n must be >= 1")
        return self


def _sections():
    return {f.name for f in fields(RunConfig)}


def _format(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, hint):
    raw = raw.strip()
    origin = get_origin(hint)
    if origin in (tuple, Tuple):
        args = get_args(hint)
        parts = [p.strip() for p in raw.split(",") if p.strip()] if raw else []
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse(p, args[0]) for p in parts)
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values")
        return tuple(_parse(p, a) for p, a in zip(parts, args))
    if hint is bool:
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ValueError("expected true/false")
        return raw.lower() in ("true", "1")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    return raw


def parse_config_text(text: str, source: str = "<config>", base: Optional[RunConfig] = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        try:
            cfg.set(key.strip(), value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return cfg


def load_config(path: Optional[PathLike] = None, overrides: Optional[Mapping[str, object]] = None) -> RunConfig:
    """Defaults, then the file (if any), then ``overrides`` (already-typed or raw strings)."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg = parse_config_text(p.read_text(), str(p), cfg)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        cfg.set(key, value if isinstance(value, str) else _format(value))
    return cfg.validate()


def write_run_txt(out_dir: PathLike, cfg: RunConfig, extra: Optional[Dict[str, object]] = None) -> Path:
    """Echo the resolved configuration; the file parses back with :func:`load_config`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [cfg.to_text()]
    for k, v in (extra or {}).items():
        lines.append(f"# {k} = {v}\n")
    path = out / "run.txt"
    path.write_text("".join(lines))
    return path
