"""Residual spatio-temporal graph network with multi-branch input."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import tensor as tn
from .features import BRANCH_CHANNELS, PoseSequence, build_branches
from .skeleton import COCO17, PartitionedAdjacency, SkeletonSpec, graph_conv, spatial_partition
from .tensor import BNState, Parameter, Tensor

__all__ = [
    "ConfigError", "Module", "BatchNorm", "Pointwise", "GraphConv", "TemporalConv",
    "Linear", "BlockConfig", "ModelConfig", "Block", "ResGCN", "preset_config",
    "PRESETS", "count_parameters", "ActivationMap", "activation_map",
]


class ConfigError(ValueError):
    """A model configuration or its inputs are inconsistent."""


def _flatten(items) -> Iterator[tuple[str, object]]:
    """Walk nested lists, tuples and dicts, yielding dotted paths to the leaves."""
    for key, val in items:
        if isinstance(val, (list, tuple)):
            yield from _flatten((f"{key}.{i}", v) for i, v in enumerate(val))
        elif isinstance(val, dict):
            yield from _flatten((f"{key}.{k}", v) for k, v in val.items())
        else:
            yield key, val


class Module:
    """Minimal container that discovers parameters and BN buffers by attribute walk."""

    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        yield from _flatten(vars(self).items())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, BNState):
                yield name + ".running_mean", val.running_mean
                yield name + ".running_var", val.running_var
            elif isinstance(val, Module):
                yield from val.named_buffers(name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def name_parameters(self) -> None:
        """Give every parameter its attribute path as a unique name."""
        seen = set()
        for name, p in self.named_parameters():
            if name in seen or id(p) in seen:
                raise ConfigError(f"parameter {name!r} is registered twice")
            seen.update((name, id(p)))
            p.name = name

    def bn_states(self) -> list[BNState]:
        return [m.state for m in self.modules() if isinstance(m, BatchNorm)]

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {n: p.data for n, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for name, arr in state.items():
            if name in params:
                target = params[name].data
            elif name in buffers:
                target = buffers[name]
            else:
                raise KeyError(f"unexpected entry {name!r}")
            if target.shape != tuple(arr.shape):
                raise ConfigError(f"{name}: shape {tuple(arr.shape)} does not match {target.shape}")
            target[...] = arr
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"missing entries: {sorted(missing)[:5]}")


def _normal(rng: np.random.Generator, shape, std, dtype):
    return (rng.standard_normal(shape) * std).astype(dtype)


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float32):
        self.weight = Parameter(np.ones(channels), dtype=dtype)
        self.bias = Parameter(np.zeros(channels), dtype=dtype)
        self.state = BNState(channels, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return tn.batch_norm(x, self.state, self.weight, self.bias, self.training)


class Pointwise(Module):
    def __init__(self, cin: int, cout: int, rng, dtype=np.float32):
        self.weight = Parameter(_normal(rng, (cout, cin), np.sqrt(2.0 / cout), dtype), dtype=dtype)
        self.bias = Parameter(np.zeros(cout), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return tn.pointwise(x, self.weight, self.bias)


class GraphConv(Module):
    def __init__(self, cin: int, cout: int, part: PartitionedAdjacency, rng, dtype=np.float32):
        self.part = part
        self.weights = [Parameter(_normal(rng, (cin, cout), np.sqrt(2.0 / cout), dtype), dtype=dtype)
                        for _ in range(len(part))]
        self.bias = Parameter(np.zeros(cout), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return graph_conv(x, self.part, self.weights, self.bias)


class TemporalConv(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int, rng, dtype=np.float32):
        self.stride = stride
        self.weight = Parameter(
            _normal(rng, (cout, cin, kernel, 1), np.sqrt(2.0 / (cout * kernel)), dtype), dtype=dtype)
        self.bias = Parameter(np.zeros(cout), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return tn.conv_temporal(x, self.weight, self.stride, bias=self.bias)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng, dtype=np.float32):
        self.weight = Parameter(_normal(rng, (cout, cin), np.sqrt(1.0 / cin), dtype), dtype=dtype)
        self.bias = Parameter(np.zeros(cout), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return tn.linear(x, self.weight, self.bias)


class PreAct(Module):
    """BN -> ReLU -> op. The ReLU is skipped on a branch's raw input."""

    def __init__(self, channels: int, op: Module, relu: bool = True, dtype=np.float32):
        self.bn = BatchNorm(channels, dtype)
        self.op = op
        self.relu = relu

    def __call__(self, x: Tensor) -> Tensor:
        h = self.bn(x)
        if self.relu:
            h = tn.relu(h)
        return self.op(h)


# ----------------------------------------------------------------- configs

@dataclass(frozen=True)
class BlockConfig:
    in_ch: int
    out_ch: int
    kind: str = "bottleneck"
    reduction: int = 1
    kernel: int = 9
    stride: int = 1
    residual: str = "auto"

    def __post_init__(self):
        if self.kind not in ("basic", "bottleneck"):
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if self.kernel % 2 == 0:
            raise ConfigError(f"temporal kernel must be odd, got {self.kernel}")
        if self.kind == "bottleneck" and (self.reduction < 1 or self.out_ch % self.reduction):
            raise ConfigError(f"out_ch {self.out_ch} is not divisible by reduction {self.reduction}")
        needs_proj = self.in_ch != self.out_ch or self.stride != 1
        if self.residual == "auto":
            object.__setattr__(self, "residual", "projection" if needs_proj else "identity")
        elif self.residual == "identity" and needs_proj:
            raise ConfigError("identity residual needs in_ch == out_ch and stride 1")
        elif self.residual == "projection" and not needs_proj:
            raise ConfigError("projection residual is only used when shape changes")
        elif self.residual not in ("none", "identity", "projection"):
            raise ConfigError(f"unknown residual kind {self.residual!r}")

    @property
    def inner(self) -> int:
        return self.out_ch // self.reduction if self.kind == "bottleneck" else self.out_ch

    def to_json(self) -> dict:
        return dict(in_ch=self.in_ch, out_ch=self.out_ch, kind=self.kind, reduction=self.reduction,
                    kernel=self.kernel, stride=self.stride, residual=self.residual)


@dataclass
class ModelConfig:
    branches: dict[str, list[BlockConfig]]
    main: list[BlockConfig]
    embedding_dim: int = 128
    skeleton: SkeletonSpec = COCO17
    preset: str = "custom"
    width: float = 1.0

    def __post_init__(self):
        if not self.branches:
            raise ConfigError("at least one input branch is required")
        outs = set()
        for name, blocks in self.branches.items():
            if name not in BRANCH_CHANNELS:
                raise ConfigError(f"unknown branch {name!r}")
            if blocks[0].in_ch != BRANCH_CHANNELS[name]:
                raise ConfigError(f"branch {name} must take {BRANCH_CHANNELS[name]} channels")
            _check_chain(blocks, f"branch {name}")
            outs.add(blocks[-1].out_ch)
        if len(outs) != 1:
            raise ConfigError(f"branch output channels differ: {sorted(outs)}")
        cat = outs.pop() * len(self.branches)
        if self.main and self.main[0].in_ch != cat:
            raise ConfigError(f"main stream takes {self.main[0].in_ch} channels, branches give {cat}")
        _check_chain(self.main, "main")

    @property
    def feature_channels(self) -> int:
        if self.main:
            return self.main[-1].out_ch
        return next(iter(self.branches.values()))[-1].out_ch * len(self.branches)

    @property
    def temporal_stride(self) -> int:
        s = 1
        for b in list(next(iter(self.branches.values()))) + list(self.main):
            s *= b.stride
        return s

    def to_json(self) -> dict:
        return {
            "preset": self.preset, "width": self.width, "embedding_dim": self.embedding_dim,
            "skeleton": self.skeleton.to_json(),
            "branches": {k: [b.to_json() for b in v] for k, v in self.branches.items()},
            "main": [b.to_json() for b in self.main],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        return cls(
            branches={k: [BlockConfig(**b) for b in v] for k, v in doc["branches"].items()},
            main=[BlockConfig(**b) for b in doc["main"]],
            embedding_dim=doc["embedding_dim"], skeleton=SkeletonSpec.from_json(doc["skeleton"]),
            preset=doc.get("preset", "custom"), width=doc.get("width", 1.0),
        )


def _check_chain(blocks: Sequence[BlockConfig], where: str):
    for i, (a, b) in enumerate(zip(blocks, blocks[1:])):
        if a.out_ch != b.in_ch:
            raise ConfigError(f"{where} block {i + 1}: takes {b.in_ch} channels, previous gives {a.out_ch}")


PRESETS = ("n21-r8", "n51-r4")


def _ch(c: int, width: float, r: int) -> int:
    return max(r, int(round(c * width / r)) * r)


def preset_config(name: str = "n21-r8", *, width: float = 1.0, skeleton: SkeletonSpec = COCO17,
                  branches: Sequence[str] = ("joints", "velocity", "bones"),
                  embedding_dim: int = 128, kernel: int = 9) -> ModelConfig:
    """Block schedule of a named preset, optionally with all widths scaled."""
    key = name.lower()
    if key not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    r = 8 if key == "n21-r8" else 4
    c64, c32 = _ch(64, width, r), _ch(32, width, r)
    c128, c256 = _ch(128, width, r), _ch(256, width, r)
    stem = lambda cin: [  # noqa: E731
        BlockConfig(cin, c64, "basic", kernel=kernel),
        BlockConfig(c64, c64, "bottleneck", r, kernel),
        BlockConfig(c64, c32, "bottleneck", r, kernel),
    ]
    cat = c32 * len(branches)
    if key == "n21-r8":
        main = [
            BlockConfig(cat, c128, "bottleneck", r, kernel, stride=2),
            BlockConfig(c128, c128, "bottleneck", r, kernel),
            BlockConfig(c128, c256, "bottleneck", r, kernel, stride=2),
            BlockConfig(c256, c256, "bottleneck", r, kernel),
        ]
    else:
        main = [BlockConfig(cat, c128, "bottleneck", r, kernel, stride=2)]
        main += [BlockConfig(c128, c128, "bottleneck", r, kernel) for _ in range(2)]
        main += [BlockConfig(c128, c256, "bottleneck", r, kernel, stride=2)]
        main += [BlockConfig(c256, c256, "bottleneck", r, kernel) for _ in range(4)]
    return ModelConfig(
        branches={b: stem(BRANCH_CHANNELS[b]) for b in branches}, main=main,
        embedding_dim=embedding_dim, skeleton=skeleton, preset=key, width=width)


# ----------------------------------------------------------------- network

class Block(Module):
    """Spatial unit (graph conv) followed by temporal unit, each with its own residual."""

    def __init__(self, cfg: BlockConfig, part: PartitionedAdjacency, rng, raw_input=False,
                 dtype=np.float32):
        self.cfg = cfg
        cin, cout, mid = cfg.in_ch, cfg.out_ch, cfg.inner
        if cfg.kind == "basic":
            self.spatial = [PreAct(cin, GraphConv(cin, cout, part, rng, dtype), not raw_input, dtype)]
            self.temporal = [PreAct(cout, TemporalConv(cout, cout, cfg.kernel, cfg.stride, rng, dtype),
                                    dtype=dtype)]
        else:
            self.spatial = [
                PreAct(cin, Pointwise(cin, mid, rng, dtype), not raw_input, dtype),
                PreAct(mid, GraphConv(mid, mid, part, rng, dtype), dtype=dtype),
                PreAct(mid, Pointwise(mid, cout, rng, dtype), dtype=dtype),
            ]
            self.temporal = [
                PreAct(cout, Pointwise(cout, mid, rng, dtype), dtype=dtype),
                PreAct(mid, TemporalConv(mid, mid, cfg.kernel, cfg.stride, rng, dtype), dtype=dtype),
                PreAct(mid, Pointwise(mid, cout, rng, dtype), dtype=dtype),
            ]
        self.spatial_res = None
        self.temporal_res = None
        if cfg.residual != "none":
            if cin != cout:
                self.spatial_res = Pointwise(cin, cout, rng, dtype)
            if cfg.stride != 1:
                self.temporal_res = TemporalConv(cout, cout, 1, cfg.stride, rng, dtype)

    @property
    def part(self) -> PartitionedAdjacency:
        return next(m for m in self.modules() if isinstance(m, GraphConv)).part

    def set_partition(self, part: PartitionedAdjacency) -> None:
        for m in self.modules():
            if isinstance(m, GraphConv):
                m.part = part

    def _unit(self, ops, res, x, keep_identity):
        h = x
        for op in ops:
            h = op(h)
        if self.cfg.residual == "none":
            return h
        if res is not None:
            return h + res(x)
        return h + x if keep_identity else h

    def __call__(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        if x.shape[1] != cfg.in_ch:
            raise ConfigError(f"block {cfg} expects {cfg.in_ch} channels, got {x.shape[1]}")
        x = self._unit(self.spatial, self.spatial_res, x, True)
        return self._unit(self.temporal, self.temporal_res, x, True)


class ResGCN(Module):
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.trained = False
        rng = np.random.default_rng(seed)
        part = spatial_partition(config.skeleton)
        self.branches = {
            name: [Block(b, part, rng, raw_input=(i == 0), dtype=dtype) for i, b in enumerate(blocks)]
            for name, blocks in config.branches.items()
        }
        self.main = [Block(b, part, rng, dtype=dtype) for b in config.main]
        self.final_bn = BatchNorm(config.feature_channels, dtype)
        self.head = Linear(config.feature_channels, config.embedding_dim, rng, dtype)
        self.name_parameters()

    def set_partition(self, part: PartitionedAdjacency) -> None:
        for m in self.modules():
            if isinstance(m, Block):
                m.set_partition(part)

    def _inputs(self, batch) -> list[Tensor]:
        names = list(self.config.branches)
        if isinstance(batch, Mapping):
            missing = [n for n in names if n not in batch]
            if missing:
                raise ConfigError(f"missing input branches {missing}")
            items = [batch[n] for n in names]
        else:
            items = list(batch)
            if len(items) != len(names):
                raise ConfigError(f"expected {len(names)} branch tensors, got {len(items)}")
        out = []
        for name, item in zip(names, items):
            try:
                t = item if isinstance(item, Tensor) else Tensor(np.asarray(item, dtype=self.dtype))
            except (TypeError, ValueError):
                raise ConfigError(f"branch {name}: input is not a numeric array") from None
            want = BRANCH_CHANNELS[name]
            if t.ndim != 4 or t.shape[1] != want:
                raise ConfigError(f"branch {name} block 0 expects (B, {want}, T, N), got {t.shape}")
            if t.shape[3] != self.config.skeleton.n_joints:
                raise ConfigError(f"branch {name}: {t.shape[3]} joints, schema has "
                                  f"{self.config.skeleton.n_joints}")
            out.append(t)
        return out

    def features(self, batch) -> Tensor:
        """Last main-stream feature map after the final BN and ReLU, (B, C, T', N)."""
        streams = []
        for (name, blocks), x in zip(self.branches.items(), self._inputs(batch)):
            for blk in blocks:
                x = blk(x)
            streams.append(x)
        h = tn.concat(streams, axis=1) if len(streams) > 1 else streams[0]
        for blk in self.main:
            h = blk(h)
        return tn.relu(self.final_bn(h))

    def __call__(self, batch, mode: str | None = None) -> Tensor:
        if mode is not None:
            self.train(mode == "train")
        h = self.features(batch)
        pooled = tn.mean(h, axis=(2, 3))
        return self.head(pooled)

    forward = __call__


def count_parameters(obj) -> int:
    """Exact number of trainable scalars of a module or a model configuration."""
    if isinstance(obj, ModelConfig):
        obj = ResGCN(obj)
    return int(sum(p.size for p in obj.parameters()))


# ----------------------------------------------------------------- activation maps

@dataclass
class ActivationMap:
    values: np.ndarray          # (T, N) in [0, 1]
    meta: dict = field(default_factory=dict)


def _minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def activation_from_features(feat: np.ndarray, T: int) -> np.ndarray:
    """Channel L2 norm of a (C, T', N) map, nearest-upsampled to T frames, scaled to [0, 1]."""
    norms = np.sqrt((feat.astype(np.float64) ** 2).sum(axis=0))
    idx = np.minimum((np.arange(T) * norms.shape[0]) // T, norms.shape[0] - 1)
    return _minmax(norms[idx])


def activation_map(seq: PoseSequence, model: ResGCN, spec: SkeletonSpec | None = None) -> ActivationMap:
    spec = spec or model.config.skeleton
    branches = build_branches(seq, spec).as_dict()
    batch = {k: v[None] for k, v in branches.items() if k in model.config.branches}
    model.eval()
    with tn.no_grad():
        feat = model.features(batch).data[0]
    meta = {"trained": bool(model.trained), "frames": seq.T, "feature_frames": int(feat.shape[1])}
    if not model.trained:
        meta["warning"] = "model has not been trained; activations reflect random weights"
    return ActivationMap(activation_from_features(feat, seq.T), meta)
