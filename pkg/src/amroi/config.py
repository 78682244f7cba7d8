"""Flat ``key = value`` run configuration.

Keys are ``section.field`` for the generator (``gen``), trainer (``train``),
model (``model``), ROI geometry (``roi``) and threshold policies (``policy``),
plus the top-level ``seed``. Tuples are comma separated. ``#`` starts a
comment. Unknown keys are rejected. The single ``seed`` feeds the generator,
the data splits and every training job.
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .datagen import GenConfig
from .metrics import FLEX_THRESHOLDS, UNIFIED_THRESHOLDS, ThresholdPolicy
from .model import ModelConfig
from .roi import RoiGeometry
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Malformed, unknown or invalid configuration entry."""


@dataclass(frozen=True)
class PolicyConfig:
    flex: tuple[float, ...] = FLEX_THRESHOLDS
    unified: tuple[float, ...] = UNIFIED_THRESHOLDS

    def policies(self) -> list[ThresholdPolicy]:
        return [ThresholdPolicy.unified(t) for t in self.unified] + [ThresholdPolicy.flex(self.flex)]


_SECTIONS = {"gen": GenConfig, "train": TrainConfig, "model": ModelConfig,
             "roi": RoiGeometry, "policy": PolicyConfig}
# fields driven by the root seed rather than set per section
_SEEDED = {("gen", "seed"), ("train", "seed")}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 42
    gen: GenConfig = field(default_factory=GenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    roi: RoiGeometry = field(default_factory=RoiGeometry)
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def resolved(self) -> "RunConfig":
        """Push the root seed into the sections that consume randomness."""
        return replace(self, gen=replace(self.gen, seed=self.seed),
                       train=replace(self.train, seed=self.seed))

    def with_overrides(self, **kv) -> "RunConfig":
        return apply_entries(self, {k: str(v) for k, v in kv.items()}, source="<override>")

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}"]
        for sec in _SECTIONS:
            obj = getattr(self, sec)
            for f in fields(obj):
                if (sec, f.name) in _SEEDED:
                    continue
                lines.append(f"{sec}.{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw: str, hint, key: str):
    origin = typing.get_origin(hint)
    try:
        if origin is tuple:
            inner = typing.get_args(hint)[0]
            return tuple(_coerce(p.strip(), inner, key) for p in raw.split(",") if p.strip())
        if hint is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None


def parse_entries(text: str, source: str = "<config>") -> dict[str, str]:
    entries = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in entries:
            raise ConfigError(f"{source}:{n}: duplicate key {key}")
        entries[key] = value
    return entries


def apply_entries(base: RunConfig, entries: dict[str, str], source: str = "<config>") -> RunConfig:
    updates: dict[str, dict] = {s: {} for s in _SECTIONS}
    seed = base.seed
    for key, raw in entries.items():
        if key == "seed":
            seed = _coerce(raw, int, key)
            continue
        sec, _, name = key.partition(".")
        cls = _SECTIONS.get(sec)
        hints = typing.get_type_hints(cls) if cls else {}
        if cls is None or name not in hints or (sec, name) in _SEEDED:
            raise ConfigError(f"{source}: unknown key {key!r}")
        updates[sec][name] = _coerce(raw, hints[name], key)
    kw = {}
    try:
        for sec, up in updates.items():
            kw[sec] = replace(getattr(base, sec), **up) if up else getattr(base, sec)
        cfg = RunConfig(seed=seed, **kw)
        cfg.gen.validate()
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{source}: {exc}") from None
    return cfg.resolved()


def load_config(path: Path | str | None) -> RunConfig:
    if path is None:
        return RunConfig().resolved()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return apply_entries(RunConfig(), parse_entries(text, str(path)), str(path))


def loads_config(text: str) -> RunConfig:
    return apply_entries(RunConfig(), parse_entries(text))


def write_resolved(cfg: RunConfig, out_dir: Path | str) -> Path:
    path = Path(out_dir) / "resolved.cfg"
    path.write_text(cfg.to_text(), encoding="utf-8")
    return path
