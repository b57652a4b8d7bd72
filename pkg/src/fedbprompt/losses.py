"""Local ReID objective: identity cross-entropy plus batch-hard triplet."""

from __future__ import annotations

from collections import Counter

import numpy as np

from . import numerics as nx
from .numerics import Tensor

DEFAULT_MARGIN = 0.3


def id_cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    logp = nx.log_softmax(logits)
    picked = logp[np.arange(b), labels]
    return -nx.mean(picked)


def _pairwise_sq(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return (diff * diff).sum(-1)


def batch_hard_triplet(features: Tensor, labels, margin: float = DEFAULT_MARGIN) -> Tensor:
    """Mean over anchors of relu(d(a, hardest pos) - d(a, hardest neg) + margin).

    Mining happens on detached distances; the loss is rebuilt on the chosen
    pairs so gradients flow only through them.
    """
    labels = np.asarray(labels)
    counts = Counter(labels.tolist())
    if len(counts) < 2:
        raise ValueError("triplet mining needs at least two identities in the batch")
    if min(counts.values()) < 2:
        raise ValueError("every identity in the batch needs at least two instances")
    b = labels.shape[0]
    dist = _pairwise_sq(features.data)
    same = labels[:, None] == labels[None, :]
    pos_pool = np.where(same & ~np.eye(b, dtype=bool), dist, -np.inf)
    neg_pool = np.where(~same, dist, np.inf)
    hardest_pos = pos_pool.argmax(axis=1)
    hardest_neg = neg_pool.argmin(axis=1)
    anchors = np.arange(b)

    def dist_to(idx):
        diff = features[anchors] - features[idx]
        return nx.sqrt(nx.tsum(diff * diff, axis=1))

    hinge = nx.relu(dist_to(hardest_pos) - dist_to(hardest_neg) + margin)
    return nx.mean(hinge)


def reid_loss(features: Tensor, logits: Tensor, labels, margin: float = DEFAULT_MARGIN) -> Tensor:
    return id_cross_entropy(logits, labels) + batch_hard_triplet(features, labels, margin)
