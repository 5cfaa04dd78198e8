"""Flat ``key = value`` run configuration with typed parsing."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

VARIANTS = ("full", "no_context", "no_attention_context")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model geometry
    K: int = 7
    D: int = 32
    C: int = 3
    T_max: int = 5
    n_stages: int = 3
    backbone_kernel: int = 5
    variant: str = "full"
    mlp_hidden: int = 64
    # optimisation
    lr: float = 0.001
    decay: float = 0.9
    epochs: int = 30
    batch_size: int = 1
    queries_per_occurrence: int = 1
    lam: float = 1.0
    teacher_forcing: bool = True
    augment: bool = False
    dtype: str = "float32"
    # randomness
    seed: int = 7
    cluster_seed: int = 0
    # evaluation
    gallery_sizes: tuple = (10,)
    task_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.K < 2:
            raise ConfigError(f"K must be >= 2, got {self.K}")
        if self.D < 1:
            raise ConfigError(f"D must be >= 1, got {self.D}")
        if self.C < 1:
            raise ConfigError(f"C must be >= 1, got {self.C}")
        if self.T_max < 1:
            raise ConfigError(f"T_max must be >= 1, got {self.T_max}")
        if self.n_stages < 1:
            raise ConfigError(f"n_stages must be >= 1, got {self.n_stages}")
        if self.backbone_kernel < 1 or self.backbone_kernel % 2 == 0:
            raise ConfigError(f"backbone_kernel must be odd and positive, got {self.backbone_kernel}")
        if self.queries_per_occurrence < 1:
            raise ConfigError(f"queries_per_occurrence must be >= 1, got {self.queries_per_occurrence}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 < self.decay < 1:
            raise ConfigError(f"decay must lie in (0, 1), got {self.decay}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.gallery_sizes = tuple(int(g) for g in self.gallery_sizes)
        if not self.gallery_sizes or min(self.gallery_sizes) < 1:
            raise ConfigError(f"gallery_sizes must be positive, got {self.gallery_sizes}")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, tuple):
                s = ",".join(str(x) for x in v)
            else:
                s = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{f.name} = {s}")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        types = {f.name: f for f in fields(cls)}
        values = dataclasses.asdict(base) if base is not None else {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, val, types[key], lineno)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())


def _parse_value(key, val, f, lineno):
    default = f.default if f.default is not dataclasses.MISSING else None
    try:
        if isinstance(default, bool):
            low = val.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(val)
        if isinstance(default, int):
            return int(val)
        if isinstance(default, float):
            return float(val)
        if isinstance(default, tuple):
            return tuple(int(x) for x in val.split(",") if x.strip())
        return val
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {val!r} for {key}") from None
