"""Supervised contrastive loss."""
from __future__ import annotations

import warnings

import numpy as np

from . import tensor as tn
from .tensor import ContractError, Tensor

__all__ = ["supcon_loss", "NoValidAnchorsWarning"]


class NoValidAnchorsWarning(RuntimeWarning):
    """No sample in the batch has a positive partner."""


def supcon_loss(embeddings: Tensor, labels, temperature: float = 0.01) -> Tensor:
    """Mean over anchors with at least one positive of the negative mean log-probability
    of their positives, with the softmax taken over every other sample.

    Embeddings are L2-normalized here. A batch without any positive pair yields
    a zero loss that carries no gradient, and emits :class:`NoValidAnchorsWarning`.
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    labels = np.asarray(labels)
    B = embeddings.shape[0]
    if B < 2 or labels.shape != (B,):
        raise ContractError(f"need B >= 2 embeddings with one label each, got {embeddings.shape} / {labels.shape}")
    not_self = ~np.eye(B, dtype=bool)
    positive = (labels[:, None] == labels[None, :]) & not_self
    n_pos = positive.sum(axis=1)
    valid = n_pos > 0
    if not valid.any():
        warnings.warn("batch has no positive pairs; loss is 0", NoValidAnchorsWarning, stacklevel=2)
        return Tensor(np.zeros((), dtype=embeddings.dtype))

    z = tn.l2_normalize(embeddings, axis=1)
    logits = tn.matmul(z, tn.transpose(z)) * (1.0 / temperature)
    lse = tn.masked_logsumexp(logits, not_self, axis=1)
    # weight[i, p] = 1 / |P(i)| for positives of valid anchors
    weight = np.where(positive, 1.0 / np.maximum(n_pos, 1)[:, None], 0.0).astype(embeddings.dtype)
    pos_term = tn.sum(logits * weight, axis=1)
    per_anchor = tn.sub(tn.mul(lse, valid.astype(embeddings.dtype)), pos_term)
    return tn.sum(per_anchor) * (1.0 / valid.sum())
