"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, nested scopes use dotted keys::

    seed = 3
    method = hylovqa
    stream.num_tasks = 5
    bank.k_v = 32
    optim.lr = 1e-3

``preset = published`` switches to the published optimizer/feature settings
(learning rate 3e-5, 36 regions); explicit keys still override a preset.
"""
from __future__ import annotations

import math
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .stream import StreamConfig
from .trainer import METHODS, PUBLISHED_LR, TrainConfig

PRESETS = {
    "desk": {},
    "published": {"optim.lr": str(PUBLISHED_LR), "stream.n_regions": "36"},
    "published_video": {"optim.lr": str(PUBLISHED_LR), "stream.n_regions": "16"},
}


@dataclass
class RunConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs/default"
    stream_path: str = ""
    heldout_group: int = -1  # -1: no object group held out
    preset: str = "desk"

    @property
    def seed(self) -> int:
        return self.train.seed

    def with_seed(self, seed: int) -> "RunConfig":
        self.train.seed = int(seed)
        self.stream.seed = int(seed)
        return self


_TOP = {"seed": ("train", "seed"), "method": ("train", "method"),
        "eval_mode": ("train", "eval_mode"), "out_dir": (None, "out_dir"),
        "stream_path": (None, "stream_path"), "heldout_group": (None, "heldout_group"),
        "preset": (None, "preset")}
_SCOPES = {"stream": ("stream",), "model": ("train", "model"), "bank": ("train", "bank"),
           "loss": ("train", "loss"), "optim": ("train", "optim")}


def _coerce(raw: str, hint):
    origin = typing.get_origin(hint)
    if origin is typing.Union or str(origin) == "<class 'types.UnionType'>":
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _coerce(raw, args[0])
    if hint is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if hint is int:
        return int(raw)
    if hint is float:
        v = float(raw)
        if not math.isfinite(v):
            raise ValueError(f"expected a finite number, got {raw!r}")
        return v
    return raw


def _resolve(cfg: RunConfig, key: str):
    """Return ``(owner object, attribute name)`` for a dotted key."""
    if key in _TOP:
        holder, attr = _TOP[key]
        return (getattr(cfg, holder) if holder else cfg), attr
    scope, _, attr = key.partition(".")
    if scope not in _SCOPES or not attr or "." in attr:
        raise KeyError(key)
    obj = cfg
    for part in _SCOPES[scope]:
        obj = getattr(obj, part)
    if attr not in {f.name for f in fields(obj)}:
        raise KeyError(key)
    return obj, attr


def set_key(cfg: RunConfig, key: str, raw: str) -> None:
    obj, attr = _resolve(cfg, key)
    hint = typing.get_type_hints(type(obj))[attr]
    setattr(obj, attr, _coerce(raw.strip(), hint))


def parse_lines(lines, source: str = "<config>") -> tuple[RunConfig, dict[str, int]]:
    entries = []
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        key, sep, value = text.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {text!r}")
        entries.append((key.strip(), value.strip(), lineno))

    cfg = RunConfig()
    where: dict[str, int] = {}
    preset = next((v for k, v, _ in entries if k == "preset"), "desk")
    if preset not in PRESETS:
        line = next(n for k, _, n in entries if k == "preset")
        raise ConfigError(f"{source}:{line}: preset: unknown {preset!r}, expected one of {sorted(PRESETS)}")
    for k, v in PRESETS[preset].items():
        set_key(cfg, k, v)
    for key, value, lineno in entries:
        if key in where:
            raise ConfigError(f"{source}:{lineno}: {key}: duplicate key (first set on line {where[key]})")
        try:
            set_key(cfg, key, value)
        except KeyError:
            raise ConfigError(f"{source}:{lineno}: {key}: unknown key") from None
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: {key}: {e}") from None
        where[key] = lineno
    if "stream.seed" not in where:
        cfg.stream.seed = cfg.train.seed
    return cfg, where


def validate(cfg: RunConfig) -> RunConfig:
    s, t = cfg.stream, cfg.train
    s.validate()
    t.model.validate(s.d)
    b, lo, o = t.bank, t.loss, t.optim
    checks = [
        (b.k_v >= 1, "bank.k_v", "must be >= 1"),
        (b.k_q >= 1, "bank.k_q", "must be >= 1"),
        (0.0 <= b.alpha <= 1.0, "bank.alpha", "must be in [0, 1]"),
        (0.0 <= b.beta <= 1.0, "bank.beta", "must be in [0, 1]"),
        (lo.gamma_mem >= 0, "loss.gamma_mem", "must be >= 0"),
        (lo.gamma_align >= 0, "loss.gamma_align", "must be >= 0"),
        (o.lr > 0, "optim.lr", "must be > 0"),
        (0.0 <= o.beta1 < 1.0, "optim.beta1", "must be in [0, 1)"),
        (0.0 <= o.beta2 < 1.0, "optim.beta2", "must be in [0, 1)"),
        (o.eps > 0, "optim.eps", "must be > 0"),
        (o.max_grad_norm > 0, "optim.max_grad_norm", "must be > 0"),
        (0.0 <= o.warmup_ratio < 1.0, "optim.warmup_ratio", "must be in [0, 1)"),
        (o.epochs_per_task >= 1, "optim.epochs_per_task", "must be >= 1"),
        (t.method in METHODS, "method", f"expected one of {METHODS}"),
        (t.eval_mode in ("frozen", "adaptive"), "eval_mode", "expected 'frozen' or 'adaptive'"),
        (cfg.heldout_group == -1 or 0 <= cfg.heldout_group < s.num_object_groups,
         "heldout_group", f"must be -1 or in [0, {s.num_object_groups})"),
    ]
    for ok, key, msg in checks:
        if not ok:
            raise ConfigError(f"{key}: {msg}")
    return cfg


def load(path, overrides: dict[str, str] | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    lines = path.read_text().splitlines()
    cfg, where = parse_lines(lines, str(path))
    for k, v in (overrides or {}).items():
        try:
            set_key(cfg, k, v)
        except (KeyError, ValueError) as e:
            raise ConfigError(f"override {k}: {e}") from None
    if overrides and "seed" in overrides and "stream.seed" not in where and "stream.seed" not in overrides:
        cfg.stream.seed = cfg.train.seed
    try:
        return validate(cfg)
    except ConfigError as e:
        key = str(e).split(":", 1)[0]
        if key in where:
            raise ConfigError(f"{path}:{where[key]}: {e}") from None
        raise


def default() -> RunConfig:
    return validate(RunConfig())


def to_items(cfg: RunConfig) -> list[tuple[str, str]]:
    """Flat ``(dotted key, value)`` pairs covering every setting."""
    items = [("preset", cfg.preset), ("seed", str(cfg.train.seed)), ("method", cfg.train.method),
             ("eval_mode", cfg.train.eval_mode), ("heldout_group", str(cfg.heldout_group))]
    for scope, chain in _SCOPES.items():
        obj = cfg
        for part in chain:
            obj = getattr(obj, part)
        for f in fields(obj):
            items.append((f"{scope}.{f.name}", str(getattr(obj, f.name))))
    return items


def to_text(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_items(cfg))


def from_items(items, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for k, v in items:
        set_key(cfg, k, v)
    return cfg
