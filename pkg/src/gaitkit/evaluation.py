"""Embedding extraction with test-time augmentation, rank-1 retrieval tables and ablations."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .config import RunConfig
from .data import DatasetIndex, center_crop, flip_lr, mirror_pad, reverse_time, shuffle_frames
from .features import PoseSequence, stack_branches
from .model import ActivationMap, ResGCN
from .skeleton import SkeletonSpec

__all__ = [
    "embed", "embed_tta", "RankTable", "rank1", "evaluate", "AblationError",
    "ABLATION_MODES", "ablation_shuffle", "write_activation_csv", "EmptyGalleryWarning",
]

log = logging.getLogger(__name__)


class EmptyGalleryWarning(RuntimeWarning):
    pass


class AblationError(ValueError):
    pass


def _unit(a: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    return a / np.maximum(n, 1e-12)


def _forward(model: ResGCN, seqs: Sequence[PoseSequence], spec: SkeletonSpec, batch_size: int) -> np.ndarray:
    names = tuple(model.config.branches)
    model.eval()
    out = []
    with tn.no_grad():
        for s in range(0, len(seqs), batch_size):
            batch = stack_branches(seqs[s:s + batch_size], spec, names, model.dtype)
            out.append(model(batch).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, model.config.embedding_dim))


def embed(model: ResGCN, seqs: Sequence[PoseSequence], t_target: int, tta: bool = True,
          spec: SkeletonSpec | None = None, shuffle_rng: np.random.Generator | None = None,
          batch_size: int = 256) -> np.ndarray:
    """Embed sequences after padding and a centre crop.

    With ``tta`` each row is the concatenation of the unit-normalized embeddings
    of the crop, its left/right flip and its time reversal.
    """
    spec = spec or model.config.skeleton
    base = [center_crop(mirror_pad(s, t_target), t_target) for s in seqs]
    if shuffle_rng is not None:
        base = [shuffle_frames(s, shuffle_rng) for s in base]
    variants = [base]
    if tta:
        variants += [[flip_lr(s, spec) for s in base], [reverse_time(s) for s in base]]
    segs = [_unit(_forward(model, v, spec, batch_size)) for v in variants]
    return np.concatenate(segs, axis=1)


def embed_tta(seq: PoseSequence, model: ResGCN, spec: SkeletonSpec | None = None,
              t_target: int = 60) -> np.ndarray:
    return embed(model, [seq], t_target, True, spec)[0]


@dataclass
class RankTable:
    probe_views: list[int]
    gallery_views: list[int]
    accuracy: np.ndarray              # percent, NaN where undefined
    condition: str = "NM"
    exclude_identical: bool = True

    def _mask(self) -> np.ndarray:
        ok = ~np.isnan(self.accuracy)
        if self.exclude_identical:
            same = np.array([[p == g for g in self.gallery_views] for p in self.probe_views], dtype=bool)
            ok &= ~same.reshape(ok.shape)
        return ok

    @property
    def row_means(self) -> np.ndarray:
        ok = self._mask()
        with np.errstate(invalid="ignore"):
            s = np.where(ok, self.accuracy, 0).sum(axis=1)
            return np.where(ok.any(axis=1), s / np.maximum(ok.sum(axis=1), 1), np.nan)

    @property
    def mean(self) -> float:
        rows = self.row_means
        rows = rows[~np.isnan(rows)]
        return float(rows.mean()) if rows.size else float("nan")

    def to_csv(self, path) -> None:
        lines = [",".join([f"probe\\gallery({self.condition})"] + [str(v) for v in self.gallery_views] + ["mean"])]
        for pv, row, m in zip(self.probe_views, self.accuracy, self.row_means):
            lines.append(",".join([str(pv)] + [f"{a:.4f}" for a in row] + [f"{m:.4f}"]))
        lines.append(",".join(["mean"] + [""] * len(self.gallery_views) + [f"{self.mean:.4f}"]))
        Path(path).write_text("\n".join(lines) + "\n")


def rank1(gallery, probe, exclude_identical: bool = True, condition: str = "NM",
          gallery_views: Sequence[int] | None = None) -> RankTable:
    """Cross-view rank-1 accuracy.

    ``gallery`` and ``probe`` are sequences of ``(embedding, subject, view)``.
    Each probe is matched to its most cosine-similar gallery entry of every
    gallery view; ties go to the lowest gallery index. Views listed in
    ``gallery_views`` without any gallery entry give undefined (NaN) cells.
    """
    if not probe:
        raise ValueError("probe set is empty")
    G = _unit(np.array([g[0] for g in gallery], dtype=np.float64)) if gallery else np.zeros((0, 1))
    P = _unit(np.array([p[0] for p in probe], dtype=np.float64))
    g_sub = np.array([str(g[1]) for g in gallery])
    g_view = np.array([int(g[2]) for g in gallery])
    p_sub = np.array([str(p[1]) for p in probe])
    p_view = np.array([int(p[2]) for p in probe])
    sim = P @ G.T if len(gallery) else np.zeros((len(probe), 0))
    pviews = sorted(set(p_view.tolist()))
    gviews = sorted(set(g_view.tolist()) | set(gallery_views or ()))
    if not gviews:
        warnings.warn("gallery is empty; no cell is defined", EmptyGalleryWarning, stacklevel=2)
    acc = np.full((len(pviews), len(gviews)), np.nan)
    for a, pv in enumerate(pviews):
        rows = np.flatnonzero(p_view == pv)
        for b, gv in enumerate(gviews):
            cols = np.flatnonzero(g_view == gv)
            if cols.size == 0:
                warnings.warn(f"empty gallery for view {gv}", EmptyGalleryWarning, stacklevel=2)
                continue
            best = cols[np.argmax(sim[np.ix_(rows, cols)], axis=1)]
            acc[a, b] = 100.0 * np.mean(g_sub[best] == p_sub[rows])
    return RankTable(pviews, gviews, acc, condition, exclude_identical)


def _labelled(index: DatasetIndex, emb: np.ndarray):
    return [(emb[i], e.subject, e.view) for i, e in enumerate(index.entries)]


def evaluate(model: ResGCN, splits: dict[str, DatasetIndex], cfg: RunConfig) -> dict[str, RankTable]:
    """Rank-1 tables for every ``probe/<subset>`` split against the ``gallery`` split."""
    if "gallery" not in splits:
        raise ValueError("splits contain no gallery")
    rng = np.random.default_rng([cfg.seed, 7919]) if cfg.shuffle_test else None

    def emb(ix):
        seqs = [ix.load(i) for i in range(len(ix))]
        return embed(model, seqs, cfg.t_target, cfg.tta, shuffle_rng=rng)

    gallery = _labelled(splits["gallery"], emb(splits["gallery"]))
    tables = {}
    for name in sorted(k for k in splits if k.startswith("probe/")):
        cond = name.split("/", 1)[1]
        probe = _labelled(splits[name], emb(splits[name]))
        tables[cond] = rank1(gallery, probe, cfg.exclude_identical, cond)
    return tables


ABLATION_MODES = ("train-sort/test-sort", "train-sort/test-shuffle", "train-shuffle/test-sort")


def ablation_shuffle(index: DatasetIndex, cfg: RunConfig, mode: str, model: ResGCN | None = None,
                     out_dir=None) -> tuple[dict[str, RankTable], ResGCN]:
    """Run one sort/shuffle control condition end to end without TTA.

    Pass ``model`` to reuse a network already trained under the mode's training
    condition. Multi-branch inputs are refused because velocity channels carry
    temporal order regardless of frame shuffling.
    """
    from .training import train

    if mode not in ABLATION_MODES:
        raise AblationError(f"unknown mode {mode!r}; choose from {ABLATION_MODES}")
    if cfg.branch_list != ("joints",):
        raise AblationError("temporal ablation needs the joints-only branch; "
                            f"got branches {cfg.branch_list}")
    train_mode, test_mode = (m.split("-", 1)[1] for m in mode.split("/"))
    cfg = cfg.replace(shuffle_train=train_mode == "shuffle", shuffle_test=test_mode == "shuffle", tta=False)
    splits = index.split(cfg.protocol, cfg.gallery_view_list)
    if model is None:
        model = train(cfg, splits["train"], out_dir).model
    return evaluate(model, splits, cfg), model


def write_activation_csv(path, amap: ActivationMap) -> None:
    T, N = amap.values.shape
    lines = ["frame,joint,activation"]
    lines += [f"{t},{j},{amap.values[t, j]:.6f}" for t in range(T) for j in range(N)]
    Path(path).write_text("\n".join(lines) + "\n")
