"""One configuration tree for every tunable, with dotted key=value overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .backend import BackendConfig
from .factors import MatchConfig
from .features import FeatureConfig
from .frontend import FrontendConfig
from .loopdetect import LoopConfig
from .mapping import MapConfig


@dataclass
class RunToggles:
    loop_closure: bool = True
    wheel_factor: bool = True
    ground_factor: bool = True
    range_clip: float | None = None


@dataclass
class EvalConfig:
    max_dt: float = 0.02
    rpe_delta: float = 0.1
    align: bool = True


@dataclass
class Config:
    run: RunToggles = field(default_factory=RunToggles)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    map: MapConfig = field(default_factory=MapConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def items(self):
        for sec in dataclasses.fields(self):
            obj = getattr(self, sec.name)
            for f in dataclasses.fields(obj):
                yield f"{sec.name}.{f.name}", getattr(obj, f.name)

    def dumps(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.items())

    def set(self, key: str, raw) -> None:
        sec, dot, name = key.partition(".")
        if not dot or not hasattr(self, sec):
            raise KeyError(f"unknown config key {key!r}")
        obj = getattr(self, sec)
        types = {f.name: f for f in dataclasses.fields(obj)}
        if name not in types:
            raise KeyError(f"unknown config key {key!r}")
        setattr(obj, name, _coerce(getattr(obj, name), types[name].type, raw))

    def apply(self, overrides) -> "Config":
        for item in overrides:
            if isinstance(item, tuple):
                k, v = item
            else:
                k, sep, v = item.partition("=")
                if not sep:
                    raise ValueError(f"override {item!r} is not key=value")
            self.set(k.strip(), v.strip() if isinstance(v, str) else v)
        return self


def _coerce(current, annotation, raw):
    if not isinstance(raw, str):
        return raw
    ann = str(annotation)
    if raw.lower() in ("none", "null", "") and "None" in ann:
        return None
    if isinstance(current, bool) or ann == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, int) or ann == "int":
        return int(raw)
    if isinstance(current, float) or "float" in ann:
        return float(raw)
    return raw


def read_overrides(path) -> list[tuple[str, str]]:
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, sep, v = line.partition("=")
        if not sep:
            raise ValueError(f"{path}: bad override line {line!r}")
        out.append((k.strip(), v.strip()))
    return out
