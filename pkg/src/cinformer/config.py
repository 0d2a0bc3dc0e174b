"""Configuration schema: strict JSON with documented defaults.

The resolved configuration (defaults applied) is embedded in every
checkpoint, so ``Config.from_dict(cfg.to_dict()) == cfg`` must hold.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError

ATTENTION_KINDS = ("window", "topk", "dense")
TOPK_VARIANTS = ("full-key", "selected-key")


@dataclass
class AttentionConfig:
    kinds: list = field(default_factory=lambda: ["window", "window", "topk", "topk"])
    heads: int = 2
    window: int = 4
    # per stage; entries for non-topk stages are ignored
    k_tokens: list = field(default_factory=lambda: [None, None, 8, 3])
    k_channels: list = field(default_factory=lambda: [None, None, 96, 192])
    topk_variant: str = "full-key"


@dataclass
class ModelConfig:
    input_size: int = 64
    num_classes: int = 4
    stem_widths: list = field(default_factory=lambda: [16, 32, 64, 128])
    fpn_width: int = 32
    stage_widths: list = field(default_factory=lambda: [32, 64, 128, 256])
    stage_depths: list = field(default_factory=lambda: [2, 2, 2, 2])
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    inject: bool = True
    freeze_stem: bool = False

    def stage_grid(self, i: int) -> int:
        """Token grid side of encoder stage ``i`` (0-based)."""
        return self.input_size // (4 * 2 ** i)

    def window_for_stage(self, i: int) -> int:
        """Window side at stage ``i``; grids smaller than the window use one window."""
        return min(self.attention.window, self.stage_grid(i))

    def k_for_stage(self, i: int) -> tuple[int, int]:
        return self.attention.k_tokens[i], self.attention.k_channels[i]


@dataclass
class TrainConfig:
    lr: float = 7.5e-4
    weight_decay: float = 5e-3
    batch: int = 4
    steps: int = 1000
    warmup_frac: float = 0.1
    min_lr_frac: float = 0.01
    eval_every: int = 100
    seed: int = 0


@dataclass
class DataConfig:
    dir: str | None = None


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, doc: dict) -> "Config":
        errors: list[str] = []
        cfg = _build(cls, doc, "", errors)
        if errors:
            raise ConfigError("invalid config: " + "; ".join(errors))
        validate(cfg)
        return cfg

    @classmethod
    def load(cls, path) -> "Config":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(doc)

    def replace(self, **sections) -> "Config":
        return dataclasses.replace(self, **sections)


def _build(cls, doc, prefix, errors):
    if not isinstance(doc, dict):
        errors.append(f"{prefix or '<root>'} must be an object")
        return cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    errors.extend(f"unknown key {prefix}{k}" for k in unknown)
    kwargs = {}
    for name, f in fields.items():
        if name not in doc:
            continue
        value = doc[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.", errors)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _per_stage(value, name):
    if value is None or isinstance(value, int):
        return [value] * 4
    if isinstance(value, list) and len(value) == 4:
        return list(value)
    raise ConfigError(f"model.attention.{name} must be an int or a list of 4 entries")


def validate(cfg: Config) -> None:
    """Cross-field checks; raises ConfigError listing every problem."""
    m, a, t = cfg.model, cfg.model.attention, cfg.train
    problems = []

    def need(cond, msg):
        if not cond:
            problems.append(msg)

    a.k_tokens = _per_stage(a.k_tokens, "k_tokens")
    a.k_channels = _per_stage(a.k_channels, "k_channels")
    for name in ("stem_widths", "stage_widths", "stage_depths"):
        v = getattr(m, name)
        need(isinstance(v, list) and len(v) == 4 and all(isinstance(x, int) and x > 0 for x in v),
             f"model.{name} must be 4 positive integers")
    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems))
    need(isinstance(m.input_size, int) and m.input_size > 0 and m.input_size % 32 == 0,
         "model.input_size must be a positive multiple of 32")
    need(isinstance(m.num_classes, int) and m.num_classes >= 2, "model.num_classes must be >= 2")
    need(all(m.stage_widths[i + 1] == 2 * m.stage_widths[i] for i in range(3)),
         "model.stage_widths must double from stage to stage")
    for w in m.stem_widths + m.stage_widths:
        need(w % 8 == 0, f"width {w} not divisible into 8 normalisation groups")
    need(m.fpn_width > 0, "model.fpn_width must be positive")
    need(isinstance(a.kinds, list) and len(a.kinds) == 4 and all(k in ATTENTION_KINDS for k in a.kinds),
         f"model.attention.kinds must be 4 entries from {ATTENTION_KINDS}")
    need(a.topk_variant in TOPK_VARIANTS, f"model.attention.topk_variant must be one of {TOPK_VARIANTS}")
    need(isinstance(a.heads, int) and a.heads >= 1, "model.attention.heads must be >= 1")
    need(isinstance(a.window, int) and a.window >= 1, "model.attention.window must be >= 1")
    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems))
    for i, kind in enumerate(a.kinds):
        side, c = m.stage_grid(i), m.stage_widths[i]
        if kind in ("window", "dense"):
            need(c % a.heads == 0, f"stage {i + 1}: width {c} not divisible by {a.heads} heads")
        if kind == "window":
            need(side % m.window_for_stage(i) == 0,
                 f"stage {i + 1}: {side}x{side} grid not divisible by window {a.window}")
        if kind == "topk":
            kt, kc = a.k_tokens[i], a.k_channels[i]
            need(isinstance(kt, int) and 1 <= kt <= side * side,
                 f"stage {i + 1}: k_tokens={kt} outside [1, {side * side}]")
            need(isinstance(kc, int) and 1 <= kc <= c,
                 f"stage {i + 1}: k_channels={kc} outside [1, {c}]")
    need(t.lr > 0 and t.weight_decay >= 0, "train.lr must be > 0 and weight_decay >= 0")
    need(isinstance(t.batch, int) and t.batch >= 1, "train.batch must be >= 1")
    need(isinstance(t.steps, int) and t.steps >= 1, "train.steps must be >= 1")
    need(0 <= t.warmup_frac < 1, "train.warmup_frac must lie in [0, 1)")
    need(0 <= t.min_lr_frac <= 1, "train.min_lr_frac must lie in [0, 1]")
    need(isinstance(t.eval_every, int) and t.eval_every >= 1, "train.eval_every must be >= 1")
    need(isinstance(t.seed, int) and t.seed >= 0, "train.seed must be a non-negative integer")
    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems))


def micro_config(num_classes: int = 2, input_size: int = 32) -> Config:
    """Smallest configuration the architecture admits; used for gradient checks."""
    side3 = input_size // 16
    return Config.from_dict({
        "model": {
            "input_size": input_size,
            "num_classes": num_classes,
            "stem_widths": [8, 8, 16, 16],
            "fpn_width": 8,
            "stage_widths": [8, 16, 32, 64],
            "stage_depths": [1, 1, 1, 1],
            "attention": {
                "kinds": ["window", "window", "topk", "topk"],
                "heads": 2, "window": 2,
                "k_tokens": [None, None, max(1, side3 * side3 // 2), 1],
                "k_channels": [None, None, 24, 48],
            },
        },
    })
