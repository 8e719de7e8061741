"""Run configuration: flat ``key=value`` text with dotted namespaces.

    # comments and blank lines are ignored
    model.n_q = 8
    relax.eta = 0.1
    train.milestones = 0.85,0.95

Every key can also be given on the command line as ``--set key=value``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .losses import LossConfig
from .model import ModelConfig
from .relax import RelaxConfig


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    name: str = "adamw"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.005
    momentum: float = 0.9


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 4
    milestones: tuple[float, ...] = (0.85, 0.95)
    decay_factor: float = 0.1
    val_every: int = 50
    val_size: int = 16
    # wall-clock column breaks byte-identical logs, so it is opt-in
    record_wall_ms: bool = False


@dataclass
class DataConfig:
    path: str = "data"
    n_train: int = 256
    n_val: int = 16
    things_min: int = 1
    things_max: int = 4
    noise_std: float = 0.05
    n_thing_classes: int = 4


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    relax: RelaxConfig = field(default_factory=RelaxConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    out: str = "runs/default"
    explicit: set = field(default_factory=set, repr=False, compare=False)

    SECTIONS = ("model", "relax", "loss", "optim", "train", "data")

    def validate(self) -> None:
        if "relax.remask_stage_count" not in self.explicit:
            # default: gate every stage up to the first four
            self.relax.remask_stage_count = min(4, self.model.stages)
        try:
            self.model.validate()
            self.relax.validate(self.model.stages)
            self.loss.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        ms = self.train.milestones
        if any(not 0.0 < m < 1.0 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError("train.milestones must be strictly increasing in (0, 1)")
        if self.optim.name not in ("adamw", "sgd"):
            raise ConfigError("optim.name must be 'adamw' or 'sgd'")
        if self.train.steps < 0 or self.train.batch_size < 1:
            raise ConfigError("train.steps must be >= 0 and train.batch_size >= 1")
        n_stuff = self.model.n_c - self.data.n_thing_classes
        if n_stuff < 1 or self.data.n_thing_classes < 0:
            raise ConfigError("model.n_c must exceed data.n_thing_classes (need stuff classes)")

    def scene_config(self):
        from .synthdata import SceneConfig

        return SceneConfig(h=self.model.h, w=self.model.w, n_thing_classes=self.data.n_thing_classes,
                           n_stuff_classes=self.model.n_c - self.data.n_thing_classes,
                           things_min=self.data.things_min, things_max=self.data.things_max,
                           noise_std=self.data.noise_std)

    # serialisation ---------------------------------------------------------------

    def items(self) -> list[tuple[str, Any]]:
        out = []
        for section in self.SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                out.append((f"{section}.{f.name}", getattr(obj, f.name)))
        out += [("seed", self.seed), ("out", self.out)]
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def set(self, key: str, raw: str) -> None:
        self.explicit.add(key)
        if key in ("seed", "out"):
            setattr(self, key, _parse(raw, type(getattr(self, key)), key))
            if key == "seed":
                self.model.seed = self.seed
            return
        section, _, name = key.partition(".")
        if section not in self.SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(self, section)
        fields = {f.name: f for f in dataclasses.fields(obj)}
        if name not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(obj, name)
        setattr(obj, name, _parse(raw, type(current), key))


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, typ: type, key: str) -> Any:
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is tuple:
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def parse_assignment(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"expected key=value, got {text!r}")
    return key.strip(), value.strip()


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                cfg.set(*parse_assignment(line))
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
    for item in overrides:
        cfg.set(*parse_assignment(item))
    return cfg
