"""Cross-attention exposure estimator: time-aware propensity scores.

A query built from one item-time pair attends over the user's fused
interaction sequence. Per head, each sequence position keeps its softmax
weight times its value row (so summing positions recovers the classic
attention output); heads are concatenated head-major into an
exposure-aware sequence. The propensity is the logistic squash of the mean
over that sequence's entries, and the same squashed value is used both in
the exposure BCE loss and as the IPS denominator downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamRegistry, Tensor
from .encoders import FusedSequence

PROPENSITY_CLIP = 1e-15


@dataclass(frozen=True)
class AttentionConfig:
    heads: int
    dim: int

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError(f"need at least one head, got {self.heads}")
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class PropensityScore:
    """Squashed exposure probability plus the pre-squash pooled score.

    ``node`` is the raw-score graph handle; losses should consume it via
    log-sigmoid rather than re-deriving from the clipped float ``s``.
    """

    s: float
    raw: float
    node: Tensor


def squash(raw: float) -> float:
    return float(np.clip(ad.stable_sigmoid(raw), PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP))


class ExposureEstimator:
    """Multi-head cross-attention from an exposure query onto a sequence."""

    def __init__(self, registry: ParamRegistry, cfg: AttentionConfig, rng: np.random.Generator, prefix: str = "exposure"):
        self.cfg = cfg
        d, dh = cfg.dim, cfg.head_dim
        bound = 1.0 / np.sqrt(d)
        self.heads = []
        for n in range(cfg.heads):
            head = {
                name: registry.add(f"{prefix}.h{n}.{name}", rng.uniform(-bound, bound, shape))
                for name, shape in (
                    ("wq", (d, dh)),
                    ("wk", (d, dh)),
                    ("wv", (d, dh)),
                    ("bq", (1, dh)),
                    ("bk", (1, dh)),
                    ("bv", (1, dh)),
                )
            }
            self.heads.append(head)

    def _check_sequence(self, seq: FusedSequence) -> None:
        if seq.length < 1:
            raise ValueError("propensity needs at least one valid sequence row")

    def exposure_aware(self, seq: FusedSequence, query: Tensor) -> Tensor:
        """Per-position weighted value rows, heads concatenated to width d."""
        self._check_sequence(seq)
        parts = []
        for head in self.heads:
            q = ad.affine(query, head["wq"], head["bq"])
            k = ad.affine(seq.s, head["wk"], head["bk"])
            v = ad.affine(seq.s, head["wv"], head["bv"])
            alpha = ad.attention_weights(q, k)           # 1 x L
            parts.append(ad.mul_col(v, ad.transpose(alpha)))  # L x dh
        return ad.concat_cols(parts)

    def propensity(self, seq: FusedSequence, query: Tensor) -> tuple[PropensityScore, Tensor]:
        """Time-aware propensity for one query against one sequence."""
        s_hat = self.exposure_aware(seq, query)
        raw = ad.mean_all(s_hat)
        return PropensityScore(s=squash(raw.item()), raw=raw.item(), node=raw), s_hat

    def raw_scores(self, seq: FusedSequence, queries: Tensor) -> Tensor:
        """Pre-squash pooled scores for a batch of query rows (B x 1).

        Mathematically identical to running :meth:`propensity` per row:
        the mean over the exposure-aware matrix collapses to
        alpha . rowsum(V) / (L * d), so the matrix is never materialized.
        """
        self._check_sequence(seq)
        contribs = []
        for head in self.heads:
            q = ad.affine(queries, head["wq"], head["bq"])  # B x dh
            k = ad.affine(seq.s, head["wk"], head["bk"])
            v = ad.affine(seq.s, head["wv"], head["bv"])
            alpha = ad.attention_weights(q, k)               # B x L
            contribs.append(ad.matmul(alpha, ad.rowsum(v)))  # B x 1
        total = contribs[0] if len(contribs) == 1 else ad.add_n(contribs)
        return ad.scale(total, 1.0 / (seq.length * self.cfg.dim))


def exposure_loss(pos_raw: Tensor, neg_raw: Tensor) -> Tensor:
    """Binary exposure loss over positive and negative item-time pairs.

    Mean-reduced over the combined set: positives contribute -log s and
    negatives -log(1 - s) with s the squashed raw score. Computed from raw
    scores via log-sigmoid so extreme scores cannot underflow.
    """
    if pos_raw.value.size == 0 or neg_raw.value.size == 0:
        raise ValueError("exposure_loss: both sample sets must be nonempty")
    total = pos_raw.value.size + neg_raw.value.size
    pos_term = ad.sum_all(ad.log_sigmoid(pos_raw))
    neg_term = ad.sum_all(ad.log_sigmoid(ad.neg(neg_raw)))
    return ad.scale(ad.add(pos_term, neg_term), -1.0 / total)
