"""Ranked contrastive loss over continuous labels, plus the L1 head loss.

For an anchor i and partner j, the contrast set contains every other sample
whose label is at least as far from the anchor's as the partner's is
(ties included). Each per-pair term is the negative log probability of the
partner against its contrast set under temperature-scaled similarities; the
batch loss averages over all anchors and partners. Similarities are either
the negative Euclidean distance between embeddings (default) or their
cosine similarity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

SIMILARITY_KINDS = ("negative-l2", "cosine")
BATCH_MODES = ("distinct-samples", "two-views")


@dataclass
class RncConfig:
    temperature: float = 2.0
    similarity: str = "negative-l2"
    batch_mode: str = "distinct-samples"

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.similarity not in SIMILARITY_KINDS:
            raise ValueError(f"unknown similarity kind {self.similarity!r}")
        if self.batch_mode not in BATCH_MODES:
            raise ValueError(f"unknown batch mode {self.batch_mode!r}")


@dataclass
class EmbeddingBatch:
    embeddings: np.ndarray  # (M, d)
    labels: np.ndarray      # (M,)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.labels.shape != (self.embeddings.shape[0],):
            raise ValueError(
                f"embeddings {self.embeddings.shape} / labels {self.labels.shape} mismatch")
        if self.embeddings.shape[0] < 2:
            raise ValueError("batch must contain at least 2 samples")
        if not (np.isfinite(self.embeddings).all() and np.isfinite(self.labels).all()):
            raise ValueError("batch contains non-finite values")

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]


def ranked_set(labels, i: int, j: int) -> list[int]:
    """Indices k != i whose label distance to anchor i is >= that of partner j."""
    labels = np.asarray(labels, dtype=np.float64)
    m = labels.shape[0]
    if i == j:
        raise ValueError("anchor and partner must differ")
    if not (0 <= i < m and 0 <= j < m):
        raise IndexError(f"indices ({i}, {j}) out of range for {m} labels")
    d_ij = abs(labels[i] - labels[j])
    return [k for k in range(m) if k != i and abs(labels[i] - labels[k]) >= d_ij]


def contrast_mask(labels: np.ndarray) -> np.ndarray:
    """Boolean (M,M,M) mask: mask[i,j,k] selects the contrast set of (i,j).

    Diagonal slices (j == i) are filled with all k != i so that downstream
    log-sum-exp stays well defined; they are zeroed out of the loss.
    """
    labels = np.asarray(labels, dtype=np.float64)
    m = labels.shape[0]
    dist = np.abs(labels[:, None] - labels[None, :])  # (i, k)
    mask = dist[:, None, :] >= dist[:, :, None]       # |yi-yk| >= |yi-yj|
    not_i = ~np.eye(m, dtype=bool)
    mask &= not_i[:, None, :]
    for i in range(m):
        mask[i, i, :] = not_i[i]
    return mask


def _similarity_logits(v: T.Tensor, config: RncConfig) -> T.Tensor:
    if config.similarity == "negative-l2":
        sim = T.scale(T.sqrt0(T.pairwise_sq_dists(v)), -1.0)
    else:
        sim = T.gram(T.l2_normalize(v))
    return T.scale(sim, 1.0 / config.temperature)


def rnc_loss_graph(v: T.Tensor, labels: np.ndarray, config: RncConfig) -> T.Tensor:
    """Build the batch loss as a tape graph over embeddings v (M, d).

    Computation runs in float64 regardless of the embedding dtype.
    """
    config.validate()
    m = v.value.shape[0]
    if m < 2:
        raise ValueError("batch must contain at least 2 samples")
    v64 = T.cast(v, np.float64)
    logits = _similarity_logits(v64, config)
    lse = T.pairwise_masked_logsumexp(logits, contrast_mask(labels))
    terms = T.sub(lse, logits)
    offdiag = v.tape.tensor((~np.eye(m, dtype=bool)).astype(np.float64))
    return T.scale(T.sum_all(T.mul(terms, offdiag)), 1.0 / (m * (m - 1)))


def rnc_batch_loss(batch: EmbeddingBatch, config: RncConfig) -> float:
    """Stabilized batch loss (mean of per-anchor losses)."""
    tape = T.Tape()
    v = tape.tensor(batch.embeddings)
    return rnc_loss_graph(v, batch.labels, config).item()


def rnc_per_sample_loss(batch: EmbeddingBatch, anchor: int, config: RncConfig) -> float:
    """Loss contribution of a single anchor: mean of its per-partner terms."""
    config.validate()
    m = batch.size
    if not 0 <= anchor < m:
        raise IndexError(f"anchor {anchor} out of range for batch of {m}")
    tape = T.Tape()
    v = T.cast(tape.tensor(batch.embeddings), np.float64)
    logits = _similarity_logits(v, config)
    lse = T.pairwise_masked_logsumexp(logits, contrast_mask(batch.labels))
    terms = lse.value - logits.value
    return float(sum(terms[anchor, j] for j in range(m) if j != anchor) / (m - 1))


def rnc_batch_gradient(batch: EmbeddingBatch, config: RncConfig):
    """Exact gradient of the batch loss w.r.t. each embedding, via the tape.

    Returns (loss, gradients) with gradients shaped like the embeddings.
    """
    tape = T.Tape()
    v = tape.tensor(batch.embeddings, requires_grad=True)
    loss = rnc_loss_graph(v, batch.labels, config)
    tape.backward(loss)
    return loss.item(), v.grad.copy()


def l1_loss(predictions, targets):
    """Mean absolute error and its subgradient w.r.t. the predictions.

    The subgradient at exact ties is 0.
    """
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("empty input")
    resid = p - t
    return float(np.abs(resid).mean()), np.sign(resid) / p.size


def l1_loss_graph(pred: T.Tensor, targets: np.ndarray) -> T.Tensor:
    """Tape version of the L1 loss for end-to-end training (float64 reduction)."""
    t = np.asarray(targets, dtype=np.float64)
    if pred.value.shape != t.shape:
        raise T.ShapeMismatchError(f"l1: predictions {pred.value.shape} vs targets {t.shape}")
    diff = T.sub(T.cast(pred, np.float64), pred.tape.tensor(t))
    return T.mean_all(T.abs_(diff))
