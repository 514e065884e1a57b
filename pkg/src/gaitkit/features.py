"""Pose sequences and the pre-computed joint, velocity and bone input branches."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .skeleton import SkeletonSpec

__all__ = [
    "PoseSequence", "BranchTensor", "CONDITIONS", "BRANCH_CHANNELS",
    "normalize_coordinates", "relative_positions", "motion_velocity",
    "bone_features", "build_branches", "stack_branches",
]

CONDITIONS = ("NM", "BG", "CL", "NA")
BRANCH_CHANNELS = {"joints": 5, "velocity": 4, "bones": 4}


@dataclass
class PoseSequence:
    """One walking sequence; ``frames`` is (T, N, 3) holding x px, y px, confidence."""
    frames: np.ndarray
    subject_id: str = "0"
    view: int = 0
    condition: str = "NA"
    seq_index: int = 1
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be (T>=1, N, 3), got {self.frames.shape}")
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown walking condition {self.condition!r}")
        conf = self.frames[..., 2]
        if (conf < 0).any() or (conf > 1).any():
            raise ValueError("keypoint confidence must lie in [0, 1]")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def n_joints(self) -> int:
        return self.frames.shape[1]

    def with_frames(self, frames: np.ndarray) -> "PoseSequence":
        return replace(self, frames=frames)

    def check(self, spec: SkeletonSpec) -> None:
        if self.n_joints != spec.n_joints:
            raise ValueError(f"sequence has {self.n_joints} joints, schema {spec.name} has {spec.n_joints}")


@dataclass
class BranchTensor:
    joints: np.ndarray    # (5, T, N): x, y, conf, rx, ry
    velocity: np.ndarray  # (4, T, N): dx1, dy1, dx2, dy2
    bones: np.ndarray     # (4, T, N): lx, ly, ax, ay

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"joints": self.joints, "velocity": self.velocity, "bones": self.bones}


def _coords(seq) -> np.ndarray:
    frames = seq.frames if isinstance(seq, PoseSequence) else np.asarray(seq, dtype=np.float64)
    return frames[..., :2]


def normalize_coordinates(xy: np.ndarray, center: int) -> np.ndarray:
    """Centre on the mean center-joint position and scale by half the pose height."""
    xy = np.asarray(xy, dtype=np.float64)
    origin = xy[:, center, :].mean(axis=0)
    height = xy[..., 1].max() - xy[..., 1].min()
    scale = height / 2 if height > 1e-9 else 1.0
    return (xy - origin) / scale


def relative_positions(seq, spec: SkeletonSpec) -> np.ndarray:
    """(2, T, N) offset of every joint from the center joint of the same frame."""
    xy = _coords(seq)
    rel = xy - xy[:, spec.center:spec.center + 1, :]
    return rel.transpose(2, 0, 1)


def motion_velocity(seq) -> np.ndarray:
    """(4, T, N) displacement to the next and the second next frame; trailing frames are zero."""
    xy = _coords(seq)
    T = xy.shape[0]
    out = np.zeros((4,) + xy.shape[:2])
    for i, ch in ((1, 0), (2, 2)):
        if T > i:
            d = xy[i:] - xy[:-i]
            out[ch, :T - i] = d[..., 0]
            out[ch + 1, :T - i] = d[..., 1]
    return out


def bone_features(seq, spec: SkeletonSpec) -> np.ndarray:
    """(4, T, N) bone vector to the parent joint and its direction angles.

    Angles are ``arccos`` of the bone's unit components, so they lie in [0, pi].
    The root joint and zero-length bones get all-zero angles.
    """
    xy = _coords(seq)
    parents = np.asarray(spec.parents)
    bone = xy - xy[:, parents, :]
    length = np.linalg.norm(bone, axis=-1, keepdims=True)
    safe = np.where(length > 1e-12, length, 1.0)
    cos = np.clip(bone / safe, -1.0, 1.0)
    ang = np.where(length > 1e-12, np.arccos(cos), 0.0)
    return np.concatenate([bone, ang], axis=-1).transpose(2, 0, 1)


def build_branches(seq: PoseSequence, spec: SkeletonSpec) -> BranchTensor:
    seq.check(spec)
    xy = normalize_coordinates(seq.frames[..., :2], spec.center)
    conf = seq.frames[..., 2]
    joints = np.concatenate([
        xy.transpose(2, 0, 1), conf[None], relative_positions(xy, spec)], axis=0)
    return BranchTensor(joints=joints, velocity=motion_velocity(xy), bones=bone_features(xy, spec))


def stack_branches(seqs, spec: SkeletonSpec, names=("joints", "velocity", "bones"),
                   dtype=np.float32) -> dict[str, np.ndarray]:
    """Batch the selected branches of equal-length sequences into (B, C, T, N) arrays."""
    built = [build_branches(s, spec).as_dict() for s in seqs]
    return {n: np.stack([b[n] for b in built]).astype(dtype) for n in names}
