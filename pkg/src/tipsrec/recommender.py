"""Sequential recommendation backbone over the exposure-aware sequence.

The default backbone runs one block of multi-head self-attention and reads
the user vector at the last valid position, scoring candidates by inner
product against their interaction embeddings. Any object with the same
``encode`` contract can be plugged in; a mean-pooling backbone and a
constructor-rejecting stub for generative backbones document the seam.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamRegistry, Tensor
from .encoders import DualItemEmbeddings


class Backbone:
    """Contract: map an exposure-aware sequence (L x d) to a user vector."""

    def encode(self, s_hat: Tensor) -> Tensor:
        raise NotImplementedError


class AttentionBackbone(Backbone):
    """One self-attention block; head outputs are summed, so each head keeps
    full width d (a d/N-wide summed head could not feed the d-wide inner
    product). User vector is the output at the last valid position."""

    def __init__(self, registry: ParamRegistry, dim: int, heads: int, rng: np.random.Generator, prefix: str = "backbone"):
        self.dim = dim
        bound = 1.0 / np.sqrt(dim)
        self.heads = []
        for n in range(heads):
            head = {
                name: registry.add(f"{prefix}.h{n}.{name}", rng.uniform(-bound, bound, shape))
                for name, shape in (
                    ("wq", (dim, dim)),
                    ("wk", (dim, dim)),
                    ("wv", (dim, dim)),
                    ("bq", (1, dim)),
                    ("bk", (1, dim)),
                    ("bv", (1, dim)),
                )
            }
            self.heads.append(head)

    def encode(self, s_hat: Tensor) -> Tensor:
        if s_hat.rows < 1:
            raise ValueError("encode_user needs at least one valid row")
        last = ad.take_rows(s_hat, [s_hat.rows - 1])
        outs = []
        for head in self.heads:
            q = ad.affine(last, head["wq"], head["bq"])
            k = ad.affine(s_hat, head["wk"], head["bk"])
            v = ad.affine(s_hat, head["wv"], head["bv"])
            outs.append(ad.scaled_dot_attention(q, k, v))
        return outs[0] if len(outs) == 1 else ad.add_n(outs)


class MeanPoolBackbone(Backbone):
    """Parameter-free identity backbone: user vector is the row mean."""

    def encode(self, s_hat: Tensor) -> Tensor:
        if s_hat.rows < 1:
            raise ValueError("encode_user needs at least one valid row")
        ones = ad.constant(np.full((1, s_hat.rows), 1.0 / s_hat.rows))
        return ad.matmul(ones, s_hat)


class GenerativeBackboneStub(Backbone):
    """Seam for generative (diffusion/CVAE) backbones; not implemented."""

    def __init__(self, *_args, **_kwargs):
        raise NotImplementedError(
            "generative backbones are not implemented; only the backbone "
            "interface seam is provided (use 'attention' or 'mean')"
        )


def make_backbone(kind: str, registry: ParamRegistry, dim: int, heads: int, rng: np.random.Generator) -> Backbone:
    if kind == "attention":
        return AttentionBackbone(registry, dim, heads, rng)
    if kind == "mean":
        return MeanPoolBackbone()
    if kind == "generative":
        return GenerativeBackboneStub()
    raise ValueError(f"unknown backbone kind {kind!r}")


def score(user: Tensor, embeddings: DualItemEmbeddings, item: int) -> Tensor:
    """Inner product of the user vector with one interaction embedding."""
    if not 0 <= item < embeddings.n_items:
        raise IndexError(f"item id {item} out of range [0, {embeddings.n_items})")
    c = embeddings.interaction_rows([item])
    return ad.matmul(user, ad.transpose(c))


def score_many(user: Tensor, embeddings: DualItemEmbeddings, items) -> Tensor:
    """Scores for a list of candidates, as a 1 x B row."""
    c = embeddings.interaction_rows(items)
    return ad.matmul(user, ad.transpose(c))


def rank(scores: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Candidates sorted by descending score; ties by ascending item index."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    candidates = np.asarray(candidates, dtype=np.int64).reshape(-1)
    if len(scores) != len(candidates):
        raise ad.DimensionError(f"rank: {len(scores)} scores vs {len(candidates)} candidates")
    order = np.lexsort((candidates, -scores))
    return candidates[order]


def rank_of(target: int, scores: np.ndarray, candidates: np.ndarray) -> int:
    """1-based position of ``target`` under the :func:`rank` ordering."""
    ordered = rank(scores, candidates)
    pos = np.flatnonzero(ordered == target)
    if pos.size == 0:
        raise ValueError(f"target {target} not among candidates")
    return int(pos[0]) + 1
