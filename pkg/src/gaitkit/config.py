"""Flat ``key = value`` run configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

__all__ = ["RunConfig", "ConfigKeyError", "parse_config_text", "load_config", "resolve_config"]


class ConfigKeyError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    # data
    data: str = ""
    protocol: str = "synthetic"
    schema: str = "coco17"
    gallery_views: str = ""          # comma list; synthetic protocol only
    # model
    preset: str = "n21-r8"
    width: float = 1.0
    branches: str = "joints,velocity,bones"
    embedding_dim: int = 128
    kernel: int = 9
    # optimisation
    epochs: int = 200
    batch_p: int = 64
    batch_k: int = 12
    steps_per_epoch: int = 0         # 0: one pass over the training sequences
    lr: float = 0.005
    warmup: float = 0.3
    div_init: float = 25.0
    div_final: float = 1e4
    tau: float = 0.01
    weight_decay: float = 1e-5
    swa: bool = True
    swa_start: float = 0.8
    checkpoint_every: int = 0        # epochs; 0: every 10% of the run
    # augmentation
    t_target: int = 60
    flip_prob: float = 0.5
    noise_xy: float = 2.0
    noise_conf: float = 0.05
    shuffle_train: bool = False
    # evaluation
    tta: bool = True
    shuffle_test: bool = False
    exclude_identical: bool = True
    # run
    seed: int = 0
    workers: int = 1
    out: str = "runs/latest"

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    @property
    def branch_list(self) -> tuple[str, ...]:
        return tuple(b.strip() for b in self.branches.split(",") if b.strip())

    @property
    def gallery_view_list(self) -> tuple[int, ...] | None:
        if not self.gallery_views.strip():
            return None
        return tuple(int(v) for v in self.gallery_views.split(","))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_dict().items())


def _fmt(v) -> str:
    return ("true" if v else "false") if isinstance(v, bool) else str(v)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value: str):
    if key not in _TYPES:
        raise ConfigKeyError(key, "unknown key")
    typ = _TYPES[key]
    value = value.strip()
    try:
        if typ == "bool":
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError:
        raise ConfigKeyError(key, f"cannot parse {value!r} as {typ}") from None
    return value


def parse_config_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigKeyError(line, f"line {n} is not 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def load_config(path) -> dict:
    return parse_config_text(Path(path).read_text())


def resolve_config(file_values: dict | None = None, overrides: dict | None = None,
                   base: RunConfig | None = None) -> RunConfig:
    """Defaults < file < command line."""
    merged = {}
    merged.update(file_values or {})
    for k, v in (overrides or {}).items():
        merged[k] = _coerce(k, v) if isinstance(v, str) else v
    for k in merged:
        if k not in _TYPES:
            raise ConfigKeyError(k, "unknown key")
    return dataclasses.replace(base or RunConfig(), **merged)
