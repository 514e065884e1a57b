"""Keypoint schemas and the spatially partitioned skeleton adjacency."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .tensor import ShapeError, Tensor, _make

__all__ = [
    "SkeletonSpec", "SchemaError", "PartitionedAdjacency", "COCO17", "OUMVLP18",
    "SCHEMAS", "get_schema", "normalize", "spatial_partition", "graph_conv",
]


class SchemaError(ValueError):
    """A skeleton schema violates its structural invariants."""


@dataclass(frozen=True)
class SkeletonSpec:
    name: str
    n_joints: int
    edges: tuple[tuple[int, int], ...]
    center: int
    parents: tuple[int, ...]
    lr_swap: tuple[int, ...]
    joint_names: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        n = self.n_joints
        edges = tuple(tuple(int(v) for v in e) for e in self.edges)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))
        object.__setattr__(self, "lr_swap", tuple(int(s) for s in self.lr_swap))
        for i, j in edges:
            if not (0 <= i < n and 0 <= j < n):
                raise SchemaError(f"{self.name}: edge ({i}, {j}) out of range")
            if i == j:
                raise SchemaError(f"{self.name}: self-loop ({i}, {i}) in raw edge list")
        if not 0 <= self.center < n:
            raise SchemaError(f"{self.name}: center {self.center} out of range")
        if len(self.parents) != n or len(self.lr_swap) != n:
            raise SchemaError(f"{self.name}: parents/lr_swap must have {n} entries")
        if any(np.isinf(self.hop_distance)):
            raise SchemaError(f"{self.name}: skeleton graph is disconnected")
        for j in range(n):
            seen, k = set(), j
            while k != self.center:
                if k in seen or not 0 <= k < n:
                    raise SchemaError(f"{self.name}: parent chain of joint {j} never reaches the center")
                seen.add(k)
                k = self.parents[k]
        if self.parents[self.center] != self.center:
            raise SchemaError(f"{self.name}: the center must be its own parent")
        swap = self.lr_swap
        if any(swap[swap[j]] != j for j in range(n)):
            raise SchemaError(f"{self.name}: lr_swap is not an involution")
        if swap[self.center] != self.center:
            raise SchemaError(f"{self.name}: lr_swap must fix the center joint")

    @cached_property
    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_joints, self.n_joints))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    @cached_property
    def hop_distance(self) -> np.ndarray:
        """BFS hop count from the center to every joint (inf if unreachable)."""
        return _bfs(self.adjacency, self.center)

    def to_json(self) -> dict:
        return {
            "name": self.name, "n_joints": self.n_joints,
            "edges": [list(e) for e in self.edges], "center": self.center,
            "parents": list(self.parents), "lr_swap": list(self.lr_swap),
            "joint_names": list(self.joint_names),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SkeletonSpec":
        try:
            return cls(
                name=doc["name"], n_joints=int(doc["n_joints"]),
                edges=tuple(tuple(e) for e in doc["edges"]), center=int(doc["center"]),
                parents=tuple(doc["parents"]), lr_swap=tuple(doc["lr_swap"]),
                joint_names=tuple(doc.get("joint_names", ())),
            )
        except KeyError as err:
            raise SchemaError(f"schema document is missing key {err}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "SkeletonSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


def _bfs(adj: np.ndarray, start: int) -> np.ndarray:
    n = adj.shape[0]
    dist = np.full(n, np.inf)
    dist[start] = 0
    queue = deque([start])
    while queue:
        i = queue.popleft()
        for j in np.flatnonzero(adj[i]):
            if np.isinf(dist[j]):
                dist[j] = dist[i] + 1
                queue.append(j)
    return dist


def bfs_parents(n: int, edges, center: int) -> tuple[int, ...]:
    """Parent map of the BFS tree rooted at ``center`` (lowest index wins ties)."""
    adj = np.zeros((n, n))
    for i, j in edges:
        adj[i, j] = adj[j, i] = 1
    parents = [-1] * n
    parents[center] = center
    queue = deque([center])
    while queue:
        i = queue.popleft()
        for j in np.flatnonzero(adj[i]):
            if parents[j] < 0:
                parents[j] = i
                queue.append(j)
    return tuple(parents)


_COCO_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
_COCO_EDGES = (
    (0, 1), (0, 2), (1, 3), (2, 4),
    (0, 5), (0, 6), (5, 6),
    (5, 7), (7, 9), (6, 8), (8, 10),
    (5, 11), (6, 12), (11, 12),
    (11, 13), (13, 15), (12, 14), (14, 16),
)

COCO17 = SkeletonSpec(
    name="coco17", n_joints=17, edges=_COCO_EDGES, center=0,
    parents=bfs_parents(17, _COCO_EDGES, 0),
    lr_swap=(0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15),
    joint_names=_COCO_NAMES,
)

# OpenPose-18 ordering used by OUMVLP-Pose: the COCO joints plus a neck.
_OU_NAMES = (
    "nose", "neck", "right_shoulder", "right_elbow", "right_wrist",
    "left_shoulder", "left_elbow", "left_wrist", "right_hip", "right_knee",
    "right_ankle", "left_hip", "left_knee", "left_ankle", "right_eye",
    "left_eye", "right_ear", "left_ear",
)
_OU_EDGES = (
    (1, 0), (1, 2), (2, 3), (3, 4), (1, 5), (5, 6), (6, 7),
    (1, 8), (8, 9), (9, 10), (1, 11), (11, 12), (12, 13),
    (0, 14), (14, 16), (0, 15), (15, 17),
)

OUMVLP18 = SkeletonSpec(
    name="oumvlp18", n_joints=18, edges=_OU_EDGES, center=1,
    parents=bfs_parents(18, _OU_EDGES, 1),
    lr_swap=(0, 1, 5, 6, 7, 2, 3, 4, 11, 12, 13, 8, 9, 10, 15, 14, 17, 16),
    joint_names=_OU_NAMES,
)

SCHEMAS = {"coco17": COCO17, "oumvlp18": OUMVLP18}


def get_schema(name_or_path: str) -> SkeletonSpec:
    if name_or_path in SCHEMAS:
        return SCHEMAS[name_or_path]
    path = Path(name_or_path)
    if path.exists():
        return SkeletonSpec.load(path)
    raise SchemaError(f"unknown skeleton schema {name_or_path!r}")


def normalize(adj) -> np.ndarray:
    """``D^-1/2 A D^-1/2`` with D the row degree; zero-degree rows stay zero."""
    adj = np.asarray(adj, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ShapeError(f"normalize: adjacency must be square, got {adj.shape}")
    deg = adj.sum(axis=1)
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = deg[nz] ** -0.5
    return inv[:, None] * adj * inv[None, :]


@dataclass(frozen=True)
class PartitionedAdjacency:
    """Self, centripetal and centrifugal adjacency, raw and normalized.

    Entry ``[i, j]`` is the weight with which joint ``j`` feeds anchor ``i``.
    """
    raw: np.ndarray          # (3, N, N) 0/1 partitions
    normalized: np.ndarray   # (3, N, N)

    @property
    def n_joints(self) -> int:
        return self.raw.shape[-1]

    def __len__(self):
        return self.raw.shape[0]

    def permuted(self, perm) -> "PartitionedAdjacency":
        """Relabel joints: new joint ``k`` is old joint ``perm[k]``."""
        perm = np.asarray(perm)
        return PartitionedAdjacency(self.raw[:, perm][:, :, perm],
                                    self.normalized[:, perm][:, :, perm])

    @classmethod
    def single(cls, adj) -> "PartitionedAdjacency":
        adj = np.asarray(adj, dtype=np.float64)
        return cls(adj[None], normalize(adj)[None])


def spatial_partition(spec: SkeletonSpec) -> PartitionedAdjacency:
    dist = spec.hop_distance
    if np.isinf(dist).any():
        raise SchemaError(f"{spec.name}: skeleton graph is disconnected")
    n = spec.n_joints
    a = spec.adjacency
    raw = np.zeros((3, n, n))
    raw[0] = np.eye(n)
    closer = dist[None, :] < dist[:, None]      # [i, j]: j closer to center than i
    raw[1] = a * closer
    raw[2] = a * ~closer
    return PartitionedAdjacency(raw, np.stack([normalize(p) for p in raw]))


def graph_conv(x: Tensor, part: PartitionedAdjacency, weights, bias: Tensor | None = None) -> Tensor:
    """Sum over partitions of ``A_k X_t W_k`` for every frame of a (B, C, T, N) tensor.

    ``weights`` holds one (C_in, C_out) matrix per partition.
    """
    weights = list(weights)
    if len(weights) != len(part):
        raise ShapeError(f"graph_conv: {len(weights)} weight matrices for {len(part)} partitions")
    if x.ndim != 4 or x.shape[3] != part.n_joints:
        raise ShapeError(f"graph_conv: input {x.shape} does not match {part.n_joints} joints")
    B, C, T, N = x.shape
    K = len(part)
    if any(w.shape[0] != C for w in weights):
        raise ShapeError(f"graph_conv: weights {[w.shape for w in weights]} do not take {C} channels")
    D = weights[0].shape[1]
    A = part.normalized.astype(x.dtype)
    xd = x.data
    # xa[k, b, c, t, m] = sum_n A[k, m, n] x[b, c, t, n]
    xa = np.matmul(xd[None], np.swapaxes(A, 1, 2)[:, None, None])
    xa_f = np.ascontiguousarray(xa.transpose(1, 3, 4, 0, 2)).reshape(B * T * N, K * C)
    W = np.concatenate([w.data for w in weights], axis=0)  # (K*C, D)
    out = xa_f @ W
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, T, N, D).transpose(0, 3, 1, 2))
    parents = [x] + weights + ([bias] if bias is not None else [])

    def fn(g):
        gf = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * T * N, D)
        gW = xa_f.T @ gf
        gxa = (gf @ W.T).reshape(B, T, N, K, C).transpose(3, 0, 4, 1, 2)
        gx = np.matmul(gxa, A[:, None, None]).sum(axis=0)
        grads = [gx] + list(np.split(gW, K, axis=0))
        if bias is not None:
            grads.append(gf.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, fn, "graph_conv")
