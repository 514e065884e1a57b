"""Sequence I/O, dataset protocols, augmentation and identity-balanced batch sampling."""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import PoseSequence
from .skeleton import SkeletonSpec

__all__ = [
    "DataError", "SamplingError", "AugmentationConfig", "Entry", "DatasetIndex",
    "mirror_pad", "random_crop", "center_crop", "flip_lr", "jitter", "reverse_time",
    "shuffle_frames", "augment", "sample_batch", "read_sequence", "write_sequence",
    "assign_split", "PROTOCOLS",
]


class DataError(ValueError):
    """Dataset files or indices are malformed."""


class SamplingError(DataError):
    """A batch cannot be drawn from the index."""


@dataclass(frozen=True)
class AugmentationConfig:
    t_target: int = 60
    flip_prob: float = 0.5
    noise_xy: float = 2.0
    noise_conf: float = 0.05

    def __post_init__(self):
        if self.t_target < 1:
            raise ValueError("t_target must be >= 1")
        if not 0 <= self.flip_prob <= 1 or self.noise_xy < 0 or self.noise_conf < 0:
            raise ValueError("flip probability must be in [0, 1] and noise amplitudes >= 0")


# ----------------------------------------------------------------- augmentations

def mirror_pad(seq: PoseSequence, t_target: int) -> PoseSequence:
    """Reflect the frame order (without repeating edge frames) until ``t_target`` frames exist."""
    T = seq.T
    if T >= t_target:
        return seq
    if T == 1:
        idx = np.zeros(t_target, dtype=int)
    else:
        period = 2 * (T - 1)
        k = np.arange(t_target) % period
        idx = np.where(k < T, k, period - k)
    return seq.with_frames(seq.frames[idx])


def center_crop(seq: PoseSequence, t_target: int) -> PoseSequence:
    if seq.T < t_target:
        raise DataError(f"sequence of {seq.T} frames is shorter than crop {t_target}; pad first")
    start = (seq.T - t_target) // 2
    return seq.with_frames(seq.frames[start:start + t_target])


def random_crop(seq: PoseSequence, t_target: int, rng: np.random.Generator) -> PoseSequence:
    if seq.T < t_target:
        raise DataError(f"sequence of {seq.T} frames is shorter than crop {t_target}; pad first")
    start = int(rng.integers(0, seq.T - t_target + 1))
    return seq.with_frames(seq.frames[start:start + t_target])


def flip_lr(seq: PoseSequence, spec: SkeletonSpec) -> PoseSequence:
    """Mirror x about the sequence-mean center-joint x and swap left/right joints."""
    frames = seq.frames.copy()
    axis = frames[:, spec.center, 0].mean()
    frames[..., 0] = 2 * axis - frames[..., 0]
    return seq.with_frames(frames[:, list(spec.lr_swap)])


def jitter(seq: PoseSequence, cfg: AugmentationConfig, rng: np.random.Generator) -> PoseSequence:
    frames = seq.frames.copy()
    shape = frames.shape[:2]
    frames[..., 0] += rng.uniform(-cfg.noise_xy, cfg.noise_xy, shape) if cfg.noise_xy else 0.0
    frames[..., 1] += rng.uniform(-cfg.noise_xy, cfg.noise_xy, shape) if cfg.noise_xy else 0.0
    if cfg.noise_conf:
        frames[..., 2] = np.clip(frames[..., 2] + rng.uniform(-cfg.noise_conf, cfg.noise_conf, shape), 0, 1)
    return seq.with_frames(frames)


def reverse_time(seq: PoseSequence) -> PoseSequence:
    return seq.with_frames(seq.frames[::-1].copy())


def shuffle_frames(seq: PoseSequence, rng: np.random.Generator) -> PoseSequence:
    return seq.with_frames(seq.frames[rng.permutation(seq.T)])


def augment(seq: PoseSequence, cfg: AugmentationConfig, spec: SkeletonSpec,
            rng: np.random.Generator, shuffle: bool = False) -> PoseSequence:
    """Training view of a sequence: pad, random crop, random flip, noise, optional frame shuffle."""
    out = random_crop(mirror_pad(seq, cfg.t_target), cfg.t_target, rng)
    if rng.random() < cfg.flip_prob:
        out = flip_lr(out, spec)
    out = jitter(out, cfg, rng)
    if shuffle:
        out = shuffle_frames(out, rng)
    return out


# ----------------------------------------------------------------- files

def write_sequence(path, seq: PoseSequence) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "joint", "x", "y", "conf"])
        for t in range(seq.T):
            for j in range(seq.n_joints):
                x, y, c = seq.frames[t, j]
                w.writerow([t, j, repr(float(x)), repr(float(y)), repr(float(c))])


def read_sequence(path, subject_id="0", view=0, condition="NA", seq_index=1) -> PoseSequence:
    path = Path(path)
    try:
        raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        with path.open() as fh:
            header = fh.readline().strip().split(",")
    except (OSError, ValueError) as err:
        raise DataError(f"cannot read sequence {path}: {err}") from None
    if header != ["frame", "joint", "x", "y", "conf"] or raw.shape[1] != 5 or raw.size == 0:
        raise DataError(f"{path}: expected header frame,joint,x,y,conf")
    t_idx, j_idx = raw[:, 0].astype(int), raw[:, 1].astype(int)
    T, N = t_idx.max() + 1, j_idx.max() + 1
    if len(raw) != T * N:
        raise DataError(f"{path}: {len(raw)} rows do not form a complete {T}x{N} grid")
    frames = np.zeros((T, N, 3))
    frames[t_idx, j_idx] = raw[:, 2:]
    try:
        return PoseSequence(frames, str(subject_id), int(view), condition, int(seq_index))
    except ValueError as err:
        raise DataError(f"{path}: {err}") from None


def _seq_dir(condition: str, seq_index: int) -> str:
    return f"{condition.lower()}-{seq_index:02d}"


def _parse_seq_dir(name: str) -> tuple[str, int]:
    cond, _, idx = name.partition("-")
    return cond.upper(), int(idx)


# ----------------------------------------------------------------- index and protocols

@dataclass
class Entry:
    subject: str
    view: int
    condition: str
    seq_index: int
    path: str | None = None
    sequence: PoseSequence | None = field(default=None, repr=False)


PROTOCOLS = ("casia-b", "oumvlp", "synthetic")


def assign_split(protocol: str, subject_rank: int, n_subjects: int, condition: str,
                 seq_index: int, view: int | None = None, gallery_views: Sequence[int] = (),
                 n_seqs: int = 0) -> tuple[str, str | None]:
    """Role of one sequence: ``("train", None)``, ``("gallery", None)`` or ``("probe", subset)``."""
    if protocol == "casia-b":
        if subject_rank < 74:
            return "train", None
        if condition == "NM":
            return ("gallery", None) if seq_index <= 4 else ("probe", "NM")
        return "probe", condition
    if protocol == "oumvlp":
        if subject_rank < n_subjects // 2:
            return "train", None
        return ("gallery", None) if seq_index == 1 else ("probe", condition)
    if protocol == "synthetic":
        if seq_index <= n_seqs // 2:
            return "train", None
        return ("gallery", None) if view in gallery_views else ("probe", condition)
    raise DataError(f"unknown protocol {protocol!r}")


class DatasetIndex:
    """Immutable list of sequences with their labels; sequences load on demand."""

    def __init__(self, entries: Sequence[Entry], schema: str = "coco17", root: Path | None = None):
        self.entries = list(entries)
        self.schema = schema
        self.root = Path(root) if root is not None else None
        self._cache: dict[int, PoseSequence] = {}

    def __len__(self):
        return len(self.entries)

    @classmethod
    def from_sequences(cls, seqs: Sequence[PoseSequence], schema="coco17") -> "DatasetIndex":
        return cls([Entry(s.subject_id, s.view, s.condition, s.seq_index, sequence=s) for s in seqs], schema)

    @classmethod
    def from_directory(cls, root, schema="coco17") -> "DatasetIndex":
        root = Path(root)
        entries = []
        for f in sorted(root.glob("*/*/*.csv")):
            cond, idx = _parse_seq_dir(f.parent.name)
            entries.append(Entry(f.parent.parent.name, int(f.stem), cond, idx,
                                 path=str(f.relative_to(root))))
        if not entries:
            raise DataError(f"no sequences found under {root}")
        return cls(entries, schema, root)

    @classmethod
    def from_manifest(cls, path) -> "DatasetIndex":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
            entries = [Entry(str(e["subject"]), int(e["view"]), e["condition"], int(e["seq_index"]),
                             path=e["path"]) for e in doc["sequences"]]
        except (OSError, ValueError, KeyError) as err:
            raise DataError(f"bad manifest {path}: {err}") from None
        return cls(entries, doc.get("schema", "coco17"), path.parent)

    def write(self, root) -> Path:
        """Write every sequence in the directory layout and a ``manifest.json``."""
        root = Path(root)
        docs = []
        for i, e in enumerate(self.entries):
            rel = Path(e.subject) / _seq_dir(e.condition, e.seq_index) / f"{e.view:03d}.csv"
            write_sequence(root / rel, self.load(i))
            docs.append({"path": str(rel), "subject": e.subject, "view": e.view,
                         "condition": e.condition, "seq_index": e.seq_index})
        manifest = root / "manifest.json"
        manifest.write_text(json.dumps({"schema": self.schema, "sequences": docs}, indent=1))
        return manifest

    def load(self, i: int) -> PoseSequence:
        e = self.entries[i]
        if e.sequence is not None:
            return e.sequence
        if i not in self._cache:
            if e.path is None or self.root is None:
                raise DataError(f"entry {i} has neither data nor a path")
            self._cache[i] = read_sequence(self.root / e.path, e.subject, e.view, e.condition, e.seq_index)
        return self._cache[i]

    @property
    def subjects(self) -> list[str]:
        return sorted({e.subject for e in self.entries})

    @property
    def views(self) -> list[int]:
        return sorted({e.view for e in self.entries})

    def subset(self, idx: Sequence[int]) -> "DatasetIndex":
        sub = DatasetIndex([self.entries[i] for i in idx], self.schema, self.root)
        sub._cache = {k: self._cache[i] for k, i in enumerate(idx) if i in self._cache}
        return sub

    def split(self, protocol: str, gallery_views: Sequence[int] | None = None) -> dict[str, "DatasetIndex"]:
        """Partition into ``train``, ``gallery`` and ``probe/<subset>`` indices."""
        subjects = self.subjects
        rank = {s: i for i, s in enumerate(subjects)}
        if protocol == "synthetic" and gallery_views is None:
            views = self.views
            gallery_views = views[: len(views) // 2]
        n_seqs = max(e.seq_index for e in self.entries)
        groups: dict[str, list[int]] = defaultdict(list)
        for i, e in enumerate(self.entries):
            role, subset = assign_split(protocol, rank[e.subject], len(subjects), e.condition,
                                        e.seq_index, e.view, gallery_views or (), n_seqs)
            groups[role if subset is None else f"{role}/{subset}"].append(i)
        return {k: self.subset(v) for k, v in sorted(groups.items())}


def sample_batch(index: DatasetIndex, P: int, K: int, rng: np.random.Generator) -> tuple[list[int], list[str]]:
    """``P`` distinct subjects with ``K`` sequences each; returns entry indices and labels."""
    by_subject: dict[str, list[int]] = defaultdict(list)
    for i, e in enumerate(index.entries):
        by_subject[e.subject].append(i)
    subjects = sorted(by_subject)
    if len(subjects) < P:
        raise SamplingError(f"need {P} subjects, index has {len(subjects)}")
    chosen = rng.choice(len(subjects), size=P, replace=False)
    idx, labels = [], []
    for s in chosen:
        pool = by_subject[subjects[s]]
        pick = rng.choice(len(pool), size=K, replace=len(pool) < K)
        idx.extend(pool[p] for p in pick)
        labels.extend([subjects[s]] * K)
    return idx, labels
