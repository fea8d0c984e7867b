"""Combined metric-learning objective: Batch-All triplet + per-strip softmax cross-entropy.

Both terms are computed independently for every horizontal strip and averaged
over strips. The triplet hinge is ``[D(a, p) - D(a, n) + m]_+`` (positive-pair
distance minus negative-pair distance), averaged over the triplets whose
hinge is strictly positive.
"""
from dataclasses import dataclass

import numpy as np

from dygait import core
from dygait.core import Tensor


class DegenerateBatchError(ValueError):
    pass


@dataclass
class Batch:
    embeddings: Tensor  # (N, S, d)
    labels: np.ndarray  # (N,) integer class ids
    logits: Tensor = None  # (N, S, n_classes)


@dataclass
class LossReport:
    loss_tri: float
    loss_cse: float
    loss_all: float
    active_triplet_fraction: float

    def csv_row(self, step):
        return f"{step},{self.loss_all!r},{self.loss_tri!r},{self.loss_cse!r},{self.active_triplet_fraction!r}"


LOG_HEADER = "step,loss_all,loss_tri,loss_cse,active_frac"


def triplet_mask(labels):
    """(N, N, N) boolean mask of valid (anchor, positive, negative) index triples."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    return pos[:, :, None] & ~same[:, None, :]


def pairwise_distances(e):
    """Euclidean distances within each strip: (N, S, d) -> (S, N, N)."""
    es = np.swapaxes(e, 0, 1)
    diff = es[:, :, None, :] - es[:, None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1)), diff


def triplet_ba(embeddings, labels, margin=0.2):
    """Batch-All triplet loss. Returns ``(loss, active_fraction)``; ``loss`` is a scalar Tensor."""
    embeddings = core.as_tensor(embeddings)
    e = embeddings.data
    if e.ndim == 2:
        e = e[:, None, :]
    mask = triplet_mask(labels)
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise DegenerateBatchError("batch contains no (anchor, positive, negative) triplet")
    dist, diff = pairwise_distances(e)  # (S, N, N), (S, N, N, d)
    s = dist.shape[0]
    hinge = dist[:, :, :, None] - dist[:, :, None, :] + margin  # (S, a, p, n)
    active = (hinge > 0) & mask
    counts = active.sum(axis=(1, 2, 3))
    sums = np.where(active, hinge, 0).sum(axis=(1, 2, 3))
    per_strip = np.where(counts > 0, sums / np.maximum(counts, 1), 0)
    loss = per_strip.mean().astype(e.dtype)
    active_fraction = float(active.sum()) / (n_valid * s)

    def backward(g):
        coef = np.where(counts > 0, g / (s * np.maximum(counts, 1)), 0).astype(e.dtype)
        act = active.astype(e.dtype)
        gd = act.sum(axis=3) - act.sum(axis=2)  # d/dD[a, p] from positives, d/dD[a, n] from negatives
        gd = gd * coef[:, None, None]
        sym = gd + np.swapaxes(gd, 1, 2)
        safe = np.where(dist > 0, dist, 1)
        wgt = np.where(dist > 0, sym / safe, 0)  # (S, N, N)
        ge = (wgt[..., None] * diff).sum(axis=2)  # (S, N, d)
        ge = np.swapaxes(ge, 0, 1)
        return (ge.reshape(embeddings.shape),)

    return core._record("triplet_ba", np.asarray(loss), (embeddings,), backward), active_fraction


def class_logits(embeddings, params):
    """Per-strip classifier: (N, S, d) -> (N, S, n_classes)."""
    return core.add_bias(core.strip_linear(embeddings, params["cls.weight"]), params["cls.bias"])


def cross_entropy_strips(logits, labels):
    """Mean over elements and strips of ``-log softmax(logits)[label]``."""
    logits = core.as_tensor(logits)
    z = logits.data
    if z.ndim == 2:
        z = z[:, None, :]
    labels = np.asarray(labels)
    n_classes = z.shape[-1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, labels[:, None, None].repeat(z.shape[1], axis=1), axis=-1)[..., 0]
    loss = (lse - picked).mean().astype(z.dtype)

    def backward(g):
        p = np.exp(shifted - lse[..., None])
        p[np.arange(z.shape[0]), :, labels] -= 1
        return ((p * (g / (z.shape[0] * z.shape[1]))).reshape(logits.shape),)

    return core._record("cross_entropy", np.asarray(loss), (logits,), backward)


def combined_loss(batch, margin=0.2):
    """Unweighted sum of the triplet and cross-entropy terms. Returns ``(loss_tensor, LossReport)``."""
    tri, frac = triplet_ba(batch.embeddings, batch.labels, margin)
    cse = cross_entropy_strips(batch.logits, batch.labels)
    total = core.add(tri, cse)
    loss_tri, loss_cse = float(tri.data), float(cse.data)
    report = LossReport(loss_tri, loss_cse, loss_tri + loss_cse, frac)
    return total, report
