"""Planar kinematic walker used as a desk-scale stand-in for real gait datasets.

The walker moves in the sagittal plane (x forward, y up) with left/right limbs
offset laterally (z). Each identity fixes limb lengths and gait dynamics; each
generated sequence adds a random start phase, small per-sequence variation,
a camera view and keypoint noise. Output uses the COCO-17 joint order.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .features import PoseSequence

__all__ = ["SyntheticIdentity", "generate_synthetic", "random_identity", "make_identities",
           "synthesize_dataset", "FPS"]

FPS = 25.0
PITCH_DEG = 20.0  # camera pitch range, degrees either side of level
LIMB_MEANS = np.array([0.53, 0.44, 0.44, 0.30, 0.27, 0.20, 0.38, 0.27])
LIMB_SPREAD = 0.08  # relative half-range of each limb length across identities
LIMBS = ("torso", "thigh", "shin", "upper_arm", "forearm", "neck", "shoulder_width", "hip_width")


@dataclass(frozen=True)
class SyntheticIdentity:
    limbs: tuple[float, ...]      # lengths in LIMBS order, body units (~metres)
    frequency: float = 1.0        # gait cycles per second
    leg_amp: float = 0.4          # hip swing, rad
    knee_amp: float = 0.7         # peak knee flexion, rad
    arm_amp: float = 0.35         # shoulder swing, rad
    elbow_amp: float = 0.3        # peak elbow flexion, rad
    arm_phase: float = 0.0        # arm lag relative to the opposite leg, rad
    knee_phase: float = 0.0       # knee flexion lag, rad
    sway: float = 0.02            # vertical pelvis bob amplitude
    noise: float = 3.0            # keypoint noise sigma, px

    def __post_init__(self):
        if len(self.limbs) != len(LIMBS) or min(self.limbs) <= 0:
            raise ValueError(f"need {len(LIMBS)} positive limb lengths")
        if not 0.5 <= self.frequency <= 1.5:
            raise ValueError(f"stride frequency {self.frequency} outside [0.5, 1.5] Hz")
        for name in ("leg_amp", "knee_amp", "arm_amp", "elbow_amp", "sway", "noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def limb(self) -> dict[str, float]:
        return dict(zip(LIMBS, self.limbs))

    def to_json(self) -> dict:
        return asdict(self)


def random_identity(rng: np.random.Generator, noise: float = 3.0) -> SyntheticIdentity:
    u = rng.uniform
    limbs = LIMB_MEANS * (1 + rng.uniform(-LIMB_SPREAD, LIMB_SPREAD, len(LIMB_MEANS)))
    return SyntheticIdentity(
        limbs=tuple(float(v) for v in limbs), frequency=float(u(0.8, 1.2)),
        leg_amp=float(u(0.3, 0.5)), knee_amp=float(u(0.5, 1.0)), arm_amp=float(u(0.2, 0.6)),
        elbow_amp=float(u(0.1, 0.5)), arm_phase=float(u(-0.4, 0.4)), knee_phase=float(u(-0.6, 0.6)),
        sway=float(u(0.01, 0.04)), noise=noise)


def make_identities(n: int, rng: np.random.Generator, mode: str = "full",
                    noise: float = 3.0) -> list[SyntheticIdentity]:
    """``full``: every parameter varies. ``dynamics``: one shared body and pose
    range; identities differ only in stride frequency, evenly spread over
    [0.6, 1.4] Hz. ``body``: shared dynamics, identities differ in limb lengths."""
    if mode == "full":
        return [random_identity(rng, noise) for _ in range(n)]
    base = random_identity(rng, noise)
    if mode == "dynamics":
        freqs = np.linspace(0.6, 1.4, n) if n > 1 else np.array([1.0])
        freqs = rng.permutation(freqs)
        return [SyntheticIdentity(**{**asdict(base), "frequency": float(f)}) for f in freqs]
    if mode == "body":
        out = []
        for _ in range(n):
            limbs = random_identity(rng, noise).limbs
            out.append(SyntheticIdentity(**{**asdict(base), "limbs": limbs}))
        return out
    raise ValueError(f"unknown identity mode {mode!r}")


def _pose3d(ident: SyntheticIdentity, t: np.ndarray, phase0: float, scale_dyn: float,
            freq: float, treadmill: bool = False) -> np.ndarray:
    """(T, 17, 3) joint positions in body units; ``treadmill`` walks in place."""
    L = ident.limb
    T = t.shape[0]
    theta = 2 * np.pi * freq * t + phase0
    leg_amp = ident.leg_amp * scale_dyn
    speed = 0.0 if treadmill else 2.0 * (L["thigh"] + L["shin"]) * np.sin(leg_amp) * freq
    out = np.zeros((T, 17, 3))
    pelvis = np.stack([speed * t,
                       L["thigh"] + L["shin"] + ident.sway * scale_dyn * np.cos(2 * theta),
                       np.zeros(T)], axis=-1)
    neck = pelvis + np.array([0.0, L["torso"], 0.0])
    # side: +1 left, -1 right; COCO indices (shoulder, elbow, wrist, hip, knee, ankle)
    for side, idx, lag in ((1.0, (5, 7, 9, 11, 13, 15), 0.0), (-1.0, (6, 8, 10, 12, 14, 16), np.pi)):
        ph = theta + lag
        alpha = leg_amp * np.sin(ph)
        kappa = ident.knee_amp * scale_dyn * (1 + np.sin(ph + ident.knee_phase)) / 2
        hip = pelvis + np.array([0.0, 0.0, side * L["hip_width"] / 2])
        knee = hip + L["thigh"] * np.stack([np.sin(alpha), -np.cos(alpha), np.zeros(T)], -1)
        ankle = knee + L["shin"] * np.stack([np.sin(alpha - kappa), -np.cos(alpha - kappa), np.zeros(T)], -1)
        arm_ph = ph + np.pi + ident.arm_phase
        beta = ident.arm_amp * scale_dyn * np.sin(arm_ph)
        eps = ident.elbow_amp * scale_dyn * (1 + np.sin(arm_ph)) / 2
        sho = neck + np.array([0.0, 0.0, side * L["shoulder_width"] / 2])
        elbow = sho + L["upper_arm"] * np.stack([np.sin(beta), -np.cos(beta), np.zeros(T)], -1)
        wrist = elbow + L["forearm"] * np.stack([np.sin(beta + eps), -np.cos(beta + eps), np.zeros(T)], -1)
        for j, p in zip(idx, (sho, elbow, wrist, hip, knee, ankle)):
            out[:, j] = p
    nose = neck + np.array([0.08, L["neck"], 0.0])
    out[:, 0] = nose
    for side, eye, ear in ((1.0, 1, 3), (-1.0, 2, 4)):
        out[:, eye] = nose + np.array([-0.02, 0.04, side * 0.035])
        out[:, ear] = nose + np.array([-0.08, 0.02, side * 0.075])
    return out


def generate_synthetic(identity: SyntheticIdentity, T: int, view: float,
                       rng: np.random.Generator, subject_id: str = "0", seq_index: int = 1,
                       condition: str = "NM", variation: float = 1.0,
                       treadmill: bool = False) -> PoseSequence:
    """One sequence of ``T`` frames seen from ``view`` degrees (90 is the side view).

    The camera looks down at a random pitch, so vertical image coordinates mix in
    depth and differ between views. ``variation`` scales the per-sequence
    randomness (start phase is always random). With ``treadmill`` the pelvis
    stays put, so the spread of positions carries no walking speed.
    """
    phase0 = rng.uniform(0, 2 * np.pi)
    freq = identity.frequency * (1 + variation * rng.uniform(-0.02, 0.02))
    scale_dyn = 1 + variation * rng.uniform(-0.03, 0.03)
    px = 100.0 * (1 + variation * rng.uniform(-0.1, 0.1))
    u0, v0 = rng.uniform(80, 160), rng.uniform(190, 230)
    t = np.arange(T) / FPS
    pose = _pose3d(identity, t, phase0, scale_dyn, freq, treadmill)
    rad = np.deg2rad(view)
    pitch = np.deg2rad(variation * rng.uniform(-PITCH_DEG, PITCH_DEG))
    u = pose[..., 0] * np.sin(rad) + pose[..., 2] * np.cos(rad)
    depth = pose[..., 2] * np.sin(rad) - pose[..., 0] * np.cos(rad)
    depth = depth - depth.mean()
    frames = np.empty((T, 17, 3))
    frames[..., 0] = u0 + px * u
    frames[..., 1] = v0 - px * (pose[..., 1] * np.cos(pitch) + depth * np.sin(pitch))
    if identity.noise > 0:
        frames[..., :2] += rng.normal(0.0, identity.noise, size=(T, 17, 2))
    frames[..., 2] = np.clip(rng.uniform(0.85, 1.0, size=(T, 17)), 0.0, 1.0)
    return PoseSequence(frames, subject_id=subject_id, view=int(view), condition=condition,
                        seq_index=seq_index)


def synthesize_dataset(n_ids: int, n_seqs: int, views, T: int | tuple[int, int],
                       rng: np.random.Generator, mode: str = "full",
                       noise: float = 3.0, treadmill: bool = False
                       ) -> tuple[list[PoseSequence], list[SyntheticIdentity]]:
    """``n_ids`` identities x ``n_seqs`` sequences x ``views``; all NM condition.

    ``T`` may be a (low, high) range to draw sequence lengths from.
    """
    identities = make_identities(n_ids, rng, mode, noise)
    seqs = []
    for i, ident in enumerate(identities):
        for s in range(1, n_seqs + 1):
            for v in views:
                length = T if isinstance(T, int) else int(rng.integers(T[0], T[1] + 1))
                seqs.append(generate_synthetic(ident, length, v, rng, subject_id=f"s{i:03d}",
                                               seq_index=s, treadmill=treadmill))
    return seqs, identities
