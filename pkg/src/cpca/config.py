"""Run configuration: nested dataclasses <-> flat ``dotted.key = value`` text."""
from __future__ import annotations

import ast
import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import StyleShift, SynthConfig
from .errors import ConfigError
from .model import ArchConfig


@dataclass
class PhaseConfig:
    lr: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 8
    iterations: int = 20000
    lr_power: float = 0.9
    lr_schedule: str = "poly"


@dataclass
class CPCAConfig:
    tau_sim: float = 0.1
    similarity: str = "dot"  # "dot" as published, or "cosine" (normalised features)
    warmup: int = -1  # -1: 20% of the adaptation iterations
    eta: float = 0.5
    m0: float = 0.9
    alpha: float = 0.9
    sce_alpha: float = 1.0
    sce_beta: float = 1.0
    sce_log_floor: float = -4.0
    pseudo_threshold: float = 0.0  # confidence gate for target pseudo-labels in the contrast terms
    pseudo_rule: str = "argmax"  # "argmax" or "class_rank" (per-class top pseudo_eta of each batch)
    pseudo_eta: float = 0.5
    aggregation_weighting: str = "inverse"
    stop_grad_cross: bool = True
    derangement: bool = False
    eb_init_noise: float = 1e-2


@dataclass
class AblationConfig:
    use_cfd: bool = True
    use_cpc: bool = True
    use_ci: bool = True
    use_selftrain: bool = True


@dataclass
class TrainConfig:
    """Defaults follow the published full-scale schedule; desk runs override them."""

    pretrain: PhaseConfig = field(default_factory=lambda: PhaseConfig(5e-4, batch_size=8, iterations=20000))
    adapt: PhaseConfig = field(default_factory=lambda: PhaseConfig(1e-3, batch_size=2, iterations=50000))
    selftrain: PhaseConfig = field(default_factory=lambda: PhaseConfig(5e-4, batch_size=8, iterations=20000))
    scale: float = 1.0  # multiplies every phase's iteration count
    cpca: CPCAConfig = field(default_factory=CPCAConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    eval_batch_size: int = 25

    def iterations(self, phase: str) -> int:
        return max(1, round(getattr(self, phase).iterations * self.scale)) \
            if getattr(self, phase).iterations > 0 else 0

    def warmup_iters(self) -> int:
        w = self.cpca.warmup
        return int(0.2 * self.iterations("adapt")) if w < 0 else w

    def validate(self):
        for name in ("pretrain", "adapt", "selftrain"):
            ph = getattr(self, name)
            if ph.iterations < 0:
                raise ConfigError(f"{name} iterations must be >= 0", f"train.{name}.iterations")
            if ph.lr <= 0:
                raise ConfigError(f"{name} learning rate must be > 0", f"train.{name}.lr")
            if ph.batch_size < 1:
                raise ConfigError(f"{name} batch size must be >= 1", f"train.{name}.batch_size")
        if self.ablation.use_ci and not self.ablation.use_cfd:
            raise ConfigError("use_ci requires use_cfd", "train.ablation.use_ci")
        c = self.cpca
        if c.tau_sim <= 0:
            raise ConfigError("tau_sim must be > 0", "train.cpca.tau_sim")
        if not 0 < c.eta <= 1:
            raise ConfigError("eta must lie in (0, 1]", "train.cpca.eta")
        if not (0 < c.m0 <= 1 and 0 < c.alpha <= 1):
            raise ConfigError("m0 and alpha must lie in (0, 1]", "train.cpca.m0")
        if c.aggregation_weighting not in ("inverse", "direct"):
            raise ConfigError("aggregation_weighting must be inverse or direct",
                              "train.cpca.aggregation_weighting")
        if c.pseudo_rule not in ("argmax", "class_rank"):
            raise ConfigError("pseudo_rule must be argmax or class_rank", "train.cpca.pseudo_rule")
        if not 0 < c.pseudo_eta <= 1:
            raise ConfigError("pseudo_eta must lie in (0, 1]", "train.cpca.pseudo_eta")
        if c.similarity not in ("dot", "cosine"):
            raise ConfigError("similarity must be dot or cosine", "train.cpca.similarity")
        if c.sce_log_floor >= 0:
            raise ConfigError("sce_log_floor must be negative", "train.cpca.sce_log_floor")


@dataclass
class PathsConfig:
    data: str = ""  # default: <out>/data
    palette: str = ""  # default: bundled ISPRS palette


@dataclass
class RunConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self):
        try:
            self.synth.validate()
        except ValueError as exc:
            raise ConfigError(str(exc), "synth") from exc
        try:
            self.model.validate()
        except ValueError as exc:
            raise ConfigError(str(exc), "model") from exc
        if self.model.num_classes != self.synth.num_classes:
            raise ConfigError("model.num_classes must equal synth.num_classes", "model.num_classes")
        self.train.validate()
        return self


# --------------------------------------------------------------------------
# flat text format

def flatten(obj, prefix="") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key, raw, current):
    if isinstance(raw, str):
        try:
            value = ast.literal_eval(raw)
        except (ValueError, SyntaxError):
            value = raw
    else:
        value = raw
    kind = type(current)
    if kind is bool:
        if isinstance(value, str) and value.lower() in ("true", "false"):
            value = value.lower() == "true"
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}", key)
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {raw!r}", key)
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {raw!r}", key)
        return float(value)
    if kind is tuple:
        if not isinstance(value, (tuple, list)):
            raise ConfigError(f"{key}: expected a tuple, got {raw!r}", key)
        return tuple(value)
    if kind is str:
        return value if isinstance(value, str) else str(raw)
    return value


def set_key(cfg: RunConfig, key: str, raw):
    parts = key.split(".")
    obj = cfg
    for p in parts[:-1]:
        if not hasattr(obj, p) or not dataclasses.is_dataclass(getattr(obj, p)):
            raise ConfigError(f"unknown config key {key!r}", key)
        obj = getattr(obj, p)
    last = parts[-1]
    names = {f.name for f in dataclasses.fields(obj)}
    if last not in names or dataclasses.is_dataclass(getattr(obj, last)):
        raise ConfigError(f"unknown config key {key!r}", key)
    setattr(obj, last, _coerce(key, raw, getattr(obj, last)))


def parse_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = copy.deepcopy(base) if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'", line)
        key, raw = (s.strip() for s in line.split("=", 1))
        set_key(cfg, key, raw)
    return cfg


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", item)
        key, raw = (s.strip() for s in item.split("=", 1))
        set_key(cfg, key, raw)
    return cfg


def to_text(cfg: RunConfig) -> str:
    lines = [f"{k} = {v!r}" for k, v in flatten(cfg).items()]
    return "\n".join(lines) + "\n"


def load_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}", str(path)) from exc
        cfg = parse_text(text, cfg)
    return apply_overrides(cfg, overrides).validate()


def desk_config() -> RunConfig:
    """The shipped desk-scale configuration (configs/desk.cfg)."""
    from importlib import resources

    text = resources.files("cpca").joinpath("desk.cfg").read_text(encoding="utf-8")
    return parse_text(text).validate()


__all__ = ["AblationConfig", "CPCAConfig", "PhaseConfig", "RunConfig", "TrainConfig",
           "PathsConfig", "StyleShift", "load_config", "parse_text", "to_text", "desk_config"]
