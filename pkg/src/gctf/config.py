"""Model configuration and the flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass
from pathlib import Path

FUSION_VARIANTS = (
    "full-hidden-concat", "cls-concat", "additive", "cross-attention",
    "gated-b2-to-b1", "gated-b1-to-b2",
)
LATERAL_PLACEMENTS = (
    "continuous", "even", "odd", "first-only", "last-only", "middle", "begin-and-end",
)
FINAL_FUSIONS = ("concatenation", "addition", "cross-attention", "gated-b1-to-b2", "gated-b2-to-b1")
GATED_VARIANTS = ("gated-b2-to-b1", "gated-b1-to-b2")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    layers: int = 2
    d: int = 8
    frames: tuple[int, int] = (2, 2)
    size: tuple[int, int] = (8, 8)
    patch: tuple[int, int, int] = (1, 8, 8)
    d_state: int = 16
    expand: int = 2
    d_conv: int = 4
    branches: int = 2
    num_classes: int = 2
    fusion_variant: str = "gated-b1-to-b2"
    lateral_placement: str = "continuous"
    final_fusion: str = "concatenation"
    skips: bool = True
    cropping: bool = False
    scan_mode: str = "zoh"
    cross_attention_source: str = "full"
    full_gate_bank: bool = False
    init_seed: int = 0

    def __post_init__(self):
        self.frames = tuple(self.frames)
        self.size = tuple(self.size)
        self.patch = tuple(self.patch)
        self.validate()

    def validate(self) -> None:
        if self.layers < 1 or self.d < 1:
            raise ConfigError("layers and d must be >= 1")
        if self.branches not in (1, 2):
            raise ConfigError(f"branches must be 1 or 2, got {self.branches}")
        if len(self.frames) != 2 or len(self.size) != 2 or len(self.patch) != 3:
            raise ConfigError("frames needs 2 values, size 2, patch 3")
        for name, allowed in (("fusion_variant", FUSION_VARIANTS),
                              ("lateral_placement", LATERAL_PLACEMENTS),
                              ("final_fusion", FINAL_FUSIONS),
                              ("scan_mode", ("zoh", "euler")),
                              ("cross_attention_source", ("full", "cls"))):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name}={getattr(self, name)!r} not in {allowed}")
        pt, ph, pw = self.patch
        H, W = self.size
        if H % ph or W % pw or any(f % pt for f in self.frames):
            raise ConfigError(f"size {self.size} / frames {self.frames} not divisible by patch {self.patch}")
        if self.branches == 2 and self.fusion_variant == "full-hidden-concat" and self.frames[0] != self.frames[1]:
            raise ConfigError("full-hidden-concat needs equal sequence lengths in both branches")

    @property
    def input_frames(self) -> int:
        return max(self.frames) if self.branches == 2 else self.frames[0]

    def grid(self, branch: int) -> tuple[int, int, int]:
        pt, ph, pw = self.patch
        return (self.frames[branch] // pt, self.size[0] // ph, self.size[1] // pw)

    def tokens(self, branch: int) -> int:
        t, h, w = self.grid(branch)
        return t * h * w


def paper_config(branches: int = 2) -> ModelConfig:
    """VideoMamba-M scale: 32 layers, d=576, 64 frames of 224x224, 1x16x16 patches."""
    return ModelConfig(layers=32, d=576, frames=(64, 64), size=(224, 224), patch=(1, 16, 16),
                       branches=branches, num_classes=400 if branches == 1 else 2)


# ---------------------------------------------------------------------------
# key = value files


def parse_kv(text: str, source: str = "<config>") -> dict[str, tuple[str, int]]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Returns key -> (value, line)."""
    out: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = (value, lineno)
    return out


def _coerce(value: str, tp, key: str):
    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        parts = [p for p in value.replace("x", ",").split(",") if p.strip()]
        if len(parts) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} comma-separated values, got {value!r}")
        return tuple(_coerce(p.strip(), a, key) for a, p in zip(args, parts))
    if tp is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: not a boolean: {value!r}")
    try:
        return tp(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {tp.__name__}") from None


def build(cls, values: dict[str, str]):
    """Instantiate a config dataclass from string values; unknown keys are errors."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[key] = _coerce(value, hints[key], key)
    return cls(**kwargs)


def split_sections(values: dict[str, tuple[str, int]], *classes, source: str = "<config>"):
    """Route each key to the dataclass that declares it; unknown keys are errors."""
    buckets = [dict() for _ in classes]
    for key, (value, lineno) in values.items():
        for bucket, cls in zip(buckets, classes):
            if key in {f.name for f in dataclasses.fields(cls)}:
                bucket[key] = value
                break
        else:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
    return [build(cls, b) for cls, b in zip(classes, buckets)]


def load_config(path: str | Path, *classes):
    classes = classes or (ModelConfig,)
    text = Path(path).read_text()
    out = split_sections(parse_kv(text, str(path)), *classes, source=str(path))
    return out[0] if len(out) == 1 else out


def dump_config(*configs) -> str:
    lines = []
    for cfg in configs:
        for f in dataclasses.fields(cfg):
            v = getattr(cfg, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def replace(cfg, **changes):
    return dataclasses.replace(cfg, **changes)

