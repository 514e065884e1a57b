"""Adam, the 1-cycle learning-rate schedule, stochastic weight averaging and the training loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import __version__
from . import tensor as tn
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import AugmentationConfig, DatasetIndex, augment, center_crop, mirror_pad, sample_batch
from .features import stack_branches
from .loss import supcon_loss
from .model import ModelConfig, ResGCN, preset_config
from .skeleton import get_schema
from .tensor import NonFiniteError, Parameter

__all__ = [
    "Adam", "OneCycleSchedule", "one_cycle_lr", "SwaState", "SwaError",
    "TrainingDiverged", "TrainResult", "build_model", "train", "load_model",
]

log = logging.getLogger(__name__)


# ----------------------------------------------------------------- optimizer

class Adam:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params: Iterable[Parameter], betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-5):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}
        self.t = 0

    def step(self, lr: float) -> None:
        for p in self.params:
            if not np.isfinite(p.grad).all():
                raise NonFiniteError(f"non-finite gradient in parameter {p.name!r}; step aborted")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p in self.params:
            g = p.grad
            m, v = self.m[p.name], self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay:
                p.data -= (lr * self.weight_decay) * p.data
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m/{k}": v for k, v in self.m.items()}
        out.update({f"adam.v/{k}": v for k, v in self.v.items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.m:
            self.m[k][...] = arrays[f"adam.m/{k}"]
            self.v[k][...] = arrays[f"adam.v/{k}"]
        self.t = t


# ----------------------------------------------------------------- schedule

def _cos_anneal(start: float, end: float, frac: float) -> float:
    return end + (start - end) / 2.0 * (1.0 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class OneCycleSchedule:
    max_lr: float = 0.005
    total_steps: int = 1000
    warmup: float = 0.3
    div_init: float = 25.0
    div_final: float = 1e4

    @property
    def warmup_steps(self) -> int:
        return max(1, min(self.total_steps, int(round(self.warmup * self.total_steps))))

    @property
    def initial_lr(self) -> float:
        return self.max_lr / self.div_init

    @property
    def final_lr(self) -> float:
        return self.max_lr / self.div_final

    def __call__(self, step: float) -> float:
        return one_cycle_lr(step, self)


def one_cycle_lr(step: float, sched: OneCycleSchedule) -> float:
    """Cosine warm-up from ``max_lr/div_init`` to ``max_lr``, then cosine decay to ``max_lr/div_final``."""
    step = min(max(step, 0), sched.total_steps)
    w = sched.warmup_steps
    if step <= w:
        return _cos_anneal(sched.initial_lr, sched.max_lr, step / w)
    rest = sched.total_steps - w
    return _cos_anneal(sched.max_lr, sched.final_lr, (step - w) / rest)


# ----------------------------------------------------------------- SWA

class SwaError(RuntimeError):
    pass


class SwaState:
    """Running arithmetic mean of parameter snapshots."""

    def __init__(self, params: Iterable[Parameter] | None = None):
        self.average: dict[str, np.ndarray] = {}
        self.n = 0
        if params is not None:
            self.average = {p.name: np.zeros_like(p.data) for p in params}

    def update(self, params: Iterable[Parameter] | dict[str, np.ndarray]) -> "SwaState":
        items = params.items() if isinstance(params, dict) else ((p.name, p.data) for p in params)
        n = self.n
        for name, w in items:
            if name not in self.average:
                self.average[name] = np.zeros_like(w)
            avg = self.average[name]
            avg += (w - avg) / (n + 1)
        self.n = n + 1
        return self

    def finalize(self, model: ResGCN, batches: Callable[[], Iterable[dict]]) -> ResGCN:
        """Swap the averaged weights in and re-estimate BN statistics with one pass over ``batches``."""
        if self.n == 0:
            raise SwaError("SWA was never activated; no snapshots to average")
        for name, p in model.named_parameters():
            p.data[...] = self.average[name]
        states = model.bn_states()
        saved = [s.momentum for s in states]
        for s in states:
            s.reset()
            s.momentum = None
        model.train()
        with tn.no_grad():
            for batch in batches():
                model(batch)
        for s, m in zip(states, saved):
            s.momentum = m
        model.eval()
        return model

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"swa/{k}": v for k, v in self.average.items()}


# ----------------------------------------------------------------- training loop

class TrainingDiverged(NonFiniteError):
    def __init__(self, message: str, checkpoint: Path | None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    model: ResGCN
    checkpoint: Path | None
    losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)


def model_config_from(cfg: RunConfig) -> ModelConfig:
    return preset_config(cfg.preset, width=cfg.width, skeleton=get_schema(cfg.schema),
                         branches=cfg.branch_list, embedding_dim=cfg.embedding_dim, kernel=cfg.kernel)


def build_model(cfg: RunConfig) -> ResGCN:
    return ResGCN(model_config_from(cfg), seed=cfg.seed)


def _eval_batches(index: DatasetIndex, cfg: RunConfig, names, spec, batch_size: int):
    def gen():
        for start in range(0, len(index), batch_size):
            seqs = [center_crop(mirror_pad(index.load(i), cfg.t_target), cfg.t_target)
                    for i in range(start, min(start + batch_size, len(index)))]
            yield stack_branches(seqs, spec, names)
    return gen


def _model_arrays(model: ResGCN, prefix="model/") -> dict[str, np.ndarray]:
    return {prefix + k: v.copy() for k, v in model.state_dict().items()}


def load_model(path, use_swa: bool = True) -> tuple[ResGCN, dict]:
    """Rebuild a model from a checkpoint directory."""
    arrays, state = load_checkpoint(path)
    mcfg = ModelConfig.from_json(state["model_config"])
    model = ResGCN(mcfg)
    has_raw = any(k.startswith("raw/model/") for k in arrays)
    prefix = "raw/model/" if has_raw and not use_swa else "model/"
    model.load_state_dict({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
    model.trained = bool(state.get("trained", False))
    model.eval()
    return model, state


def train(cfg: RunConfig, index: DatasetIndex, out_dir=None, resume=None,
          stop_after_epoch: int | None = None) -> TrainResult:
    """Train on every sequence of ``index`` (already restricted to the training split).

    Randomness for epoch ``e`` comes from ``default_rng([seed, e])`` so that a run
    resumed from an epoch checkpoint replays the uninterrupted run exactly.
    """
    spec = get_schema(cfg.schema)
    names = cfg.branch_list
    model = build_model(cfg)
    params = model.parameters()
    adam = Adam(params, weight_decay=cfg.weight_decay)
    P, K = cfg.batch_p, cfg.batch_k
    steps_per_epoch = cfg.steps_per_epoch or max(1, math.ceil(len(index) / (P * K)))
    sched = OneCycleSchedule(cfg.lr, cfg.epochs * steps_per_epoch, cfg.warmup, cfg.div_init, cfg.div_final)
    aug = AugmentationConfig(cfg.t_target, cfg.flip_prob, cfg.noise_xy, cfg.noise_conf)
    swa = SwaState(params)
    swa_epoch = int(math.floor(cfg.swa_start * cfg.epochs))
    every = cfg.checkpoint_every or max(1, cfg.epochs // 10)
    start_epoch, step = 0, 0

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    if resume is not None:
        arrays, state = load_checkpoint(resume)
        model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("model/")})
        adam.load_arrays(arrays, state["adam_t"])
        swa.average = {k[4:]: v.copy() for k, v in arrays.items() if k.startswith("swa/")}
        swa.n = state["swa_n"]
        start_epoch, step = state["epoch"], state["step"]

    metrics_fh = timing_fh = None
    if out is not None:
        mode = "a" if resume is not None and (out / "metrics.csv").exists() else "w"
        metrics_fh = (out / "metrics.csv").open(mode, newline="")
        timing_fh = (out / "timing.csv").open(mode, newline="")
        if mode == "w":
            metrics_fh.write("step,epoch,lr,loss\n")
            timing_fh.write("step,epoch,wall_ms\n")

    def state_dict(epoch):
        return {"epoch": epoch, "step": step, "adam_t": adam.t, "swa_n": swa.n,
                "config": cfg.to_dict(), "model_config": model.config.to_json(),
                "trained": step > 0, "version": __version__}

    def checkpoint(name, epoch, extra=None):
        if out is None:
            return None
        arrays = _model_arrays(model)
        arrays.update(adam.state_arrays())
        arrays.update(swa.arrays())
        arrays.update(extra or {})
        return save_checkpoint(out / "checkpoints" / name, arrays, state_dict(epoch))

    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    result = TrainResult(model, None)
    last_ckpt = Path(resume) if resume is not None else None
    try:
        for epoch in range(start_epoch, cfg.epochs):
            rng = np.random.default_rng([cfg.seed, epoch])
            model.train()
            ep_losses = []
            for _ in range(steps_per_epoch):
                t0 = time.perf_counter()
                idx, labels = sample_batch(index, P, K, rng)
                rngs = rng.spawn(len(idx))
                work = lambda a: augment(index.load(a[0]), aug, spec, a[1], cfg.shuffle_train)  # noqa: E731
                seqs = list(pool.map(work, zip(idx, rngs)) if pool else map(work, zip(idx, rngs)))
                batch = stack_branches(seqs, spec, names)
                lr = sched(step)
                try:
                    emb = model(batch)
                    loss = supcon_loss(emb, labels, cfg.tau)
                    value = float(loss.data)
                    if not math.isfinite(value):
                        raise NonFiniteError("loss is not finite")
                    if loss.requires_grad:
                        model.zero_grad()
                        tn.backward(loss)
                        adam.step(lr)
                except NonFiniteError as err:
                    raise TrainingDiverged(f"epoch {epoch} step {step}: {err}", last_ckpt) from err
                ep_losses.append(value)
                result.losses.append(value)
                if metrics_fh:
                    metrics_fh.write(f"{step},{epoch},{lr!r},{value!r}\n")
                    timing_fh.write(f"{step},{epoch},{(time.perf_counter() - t0) * 1e3:.1f}\n")
                step += 1
            result.epoch_losses.append(float(np.mean(ep_losses)))
            log.info("epoch %d loss %.4f lr %.2e", epoch, result.epoch_losses[-1], lr)
            if cfg.swa and epoch >= swa_epoch:
                swa.update(params)
            model.trained = True
            if (epoch + 1) % every == 0 and epoch + 1 < cfg.epochs:
                last_ckpt = checkpoint(f"epoch_{epoch + 1:04d}", epoch + 1)
            if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
                result.checkpoint = checkpoint(f"epoch_{epoch + 1:04d}", epoch + 1)
                return result
    finally:
        if pool:
            pool.shutdown()
        if metrics_fh:
            metrics_fh.close()
            timing_fh.close()

    raw = _model_arrays(model, "raw/model/")
    if cfg.swa and swa.n > 0:
        swa.finalize(model, _eval_batches(index, cfg, names, spec, P * K))
    model.trained = True
    model.eval()
    result.checkpoint = checkpoint("final", cfg.epochs, raw)
    return result
