"""Dual item embeddings, the time-gap MLP embedder, and sequence fusion.

Two separate trainable tables encode each item: an interaction table feeding
the recommender and an exposure table feeding the propensity estimator.
Keeping them disjoint is load-bearing: shared embeddings couple the IPS
numerator and denominator and amplify bias, so no parameter is shared and
gradients from either path land only in their own table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamRegistry, Tensor


class DualItemEmbeddings:
    """Per-item interaction and exposure embedding tables (same shape)."""

    def __init__(self, registry: ParamRegistry, n_items: int, dim: int, rng: np.random.Generator, prefix: str = "emb"):
        self.n_items = n_items
        self.dim = dim
        bound = 1.0 / np.sqrt(dim)
        self.interaction = registry.add(f"{prefix}.interaction", rng.uniform(-bound, bound, (n_items, dim)))
        self.exposure = registry.add(f"{prefix}.exposure", rng.uniform(-bound, bound, (n_items, dim)))

    def lookup_dual(self, item: int) -> tuple[Tensor, Tensor]:
        """Rows (c, e) of the two tables; gradients stay per-table."""
        if not 0 <= item < self.n_items:
            raise IndexError(f"item id {item} out of range [0, {self.n_items})")
        return ad.lookup(self.interaction, [item]), ad.lookup(self.exposure, [item])

    def interaction_rows(self, items) -> Tensor:
        return ad.lookup(self.interaction, items)

    def exposure_rows(self, items) -> Tensor:
        return ad.lookup(self.exposure, items)


class TimeEmbedder:
    """One-hidden-layer MLP from a scalar normalized gap to a d-vector."""

    def __init__(self, registry: ParamRegistry, dim: int, rng: np.random.Generator, prefix: str = "time"):
        self.dim = dim
        bound = 1.0 / np.sqrt(dim)
        self.w1 = registry.add(f"{prefix}.w1", rng.uniform(-bound, bound, (1, dim)))
        self.b1 = registry.add(f"{prefix}.b1", np.zeros((1, dim)))
        self.w2 = registry.add(f"{prefix}.w2", rng.uniform(-bound, bound, (dim, dim)))
        self.b2 = registry.add(f"{prefix}.b2", np.zeros((1, dim)))

    def embed(self, gaps) -> Tensor:
        """Embed a batch of normalized gaps; row i is the vector for gap i.

        Gaps must be finite and nonnegative; values slightly above 1 are
        allowed (test-time gaps can exceed the training min-max range).
        """
        g = np.asarray(gaps, dtype=np.float64).reshape(-1, 1)
        if not np.isfinite(g).all():
            raise ad.NumericError("embed_time: non-finite gap")
        if np.any(g < 0):
            raise ValueError("embed_time: negative normalized gap")
        x = ad.constant(g)
        hidden = ad.tanh(ad.affine(x, self.w1, self.b1))
        return ad.affine(hidden, self.w2, self.b2)


@dataclass
class FusedSequence:
    """Chronological item + time embedding sum for one user history.

    Only valid positions are stored (``s`` has ``length`` rows), so every
    attention and pooling consumer sees exactly the real interactions; the
    most recent item is always the last row.
    """

    s: Tensor
    items: np.ndarray
    gaps: np.ndarray

    @property
    def length(self) -> int:
        return self.s.rows


def fuse_sequence(
    embeddings: DualItemEmbeddings,
    time_embedder: TimeEmbedder | None,
    items,
    gaps,
    max_len: int | None = None,
) -> FusedSequence:
    """Element-wise sum of interaction-item and time embeddings.

    With ``time_embedder=None`` the sequence is the pure item-embedding
    stack (the no-time ablation). Longer histories keep the most recent
    ``max_len`` entries.
    """
    items = np.asarray(items, dtype=np.int64).reshape(-1)
    gaps = np.asarray(gaps, dtype=np.float64).reshape(-1)
    if len(items) != len(gaps):
        raise ad.DimensionError(f"fuse_sequence: {len(items)} items vs {len(gaps)} gaps")
    if max_len is not None and len(items) > max_len:
        items, gaps = items[-max_len:], gaps[-max_len:]
    item_part = embeddings.interaction_rows(items)
    if time_embedder is None:
        return FusedSequence(s=item_part, items=items, gaps=gaps)
    return FusedSequence(s=ad.add(item_part, time_embedder.embed(gaps)), items=items, gaps=gaps)


def exposure_query(
    embeddings: DualItemEmbeddings,
    time_embedder: TimeEmbedder | None,
    item: int,
    gap: float,
    delta: np.ndarray | None = None,
) -> Tensor:
    """Query vector for one item-time pair: exposure row plus time embedding.

    Reads the exposure table only (never the interaction table). ``delta``
    adds a fixed small perturbation to the time component, used for the
    same-item-different-moment counterfactual.
    """
    e = embeddings.exposure_rows([item])
    parts = [e]
    if time_embedder is not None:
        parts.append(time_embedder.embed([gap]))
    if delta is not None:
        parts.append(ad.constant(np.asarray(delta, dtype=np.float64).reshape(1, -1)))
    return parts[0] if len(parts) == 1 else ad.add_n(parts)
