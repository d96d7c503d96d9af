"""Counterfactual item-time pair construction.

Each factual training interaction (v, t) yields three hypothetical
positive-exposure pairs: the most similar item in exposure-embedding space
at the same time, a windowed-popular item at the same time, and the same
item at a slightly perturbed time. These act as exposure positives for the
propensity model and simultaneously as ranking negatives for the
recommender.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import PopularityIndex

log = logging.getLogger(__name__)


class SamplingError(RuntimeError):
    """Rejection sampling could not find enough non-colliding pairs."""


@dataclass
class CounterfactualConfig:
    top_k: int = 10
    window_seconds: float = 30 * 86400.0
    delta_bound: float = 1e-4
    negative_ratio: int = 1

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.window_seconds <= 0:
            raise ValueError(f"window_seconds must be positive, got {self.window_seconds}")
        if self.delta_bound <= 0:
            raise ValueError(f"delta_bound must be positive, got {self.delta_bound}")
        if self.negative_ratio < 1:
            raise ValueError(f"negative_ratio must be >= 1, got {self.negative_ratio}")


@dataclass
class CounterfactualTriple:
    """The three positive-exposure hypotheticals for one factual pair."""

    sim_item: int
    pop_item: int
    delta: np.ndarray  # time-embedding perturbation, |coord| <= delta_bound


@dataclass
class ExposureSampleSets:
    """Per-example exposure positives (factual + triple) and sampled negatives."""

    pos_items: np.ndarray   # length 4: factual, sim, pop, factual-again (jitter)
    pos_gaps: np.ndarray    # normalized gaps, aligned with pos_items
    delta: np.ndarray       # applied to the 4th positive only
    neg_items: np.ndarray
    neg_gaps: np.ndarray
    neg_times: np.ndarray = field(default_factory=lambda: np.empty(0))


class SimilarityCache:
    """Exact nearest neighbor per item under cosine in exposure space.

    Recomputed from the current exposure table (typically once per epoch);
    zero-norm rows are excluded both as queries and as candidates.
    """

    def __init__(self, exposure_table: np.ndarray, rng: np.random.Generator | None = None, chunk: int = 1024):
        h = np.asarray(exposure_table, dtype=np.float64)
        n = h.shape[0]
        if n < 2:
            raise ValueError("similar-item search needs at least two items")
        norms = np.linalg.norm(h, axis=1)
        valid = norms > 0.0
        self.nearest = np.full(n, -1, dtype=np.int64)
        if valid.sum() >= 2:
            unit = np.zeros_like(h)
            unit[valid] = h[valid] / norms[valid, None]
            for lo in range(0, n, chunk):
                hi = min(lo + chunk, n)
                sims = unit[lo:hi] @ unit.T
                sims[:, ~valid] = -np.inf
                for r in range(hi - lo):
                    sims[r, lo + r] = -np.inf
                    if not valid[lo + r]:
                        continue
                    self.nearest[lo + r] = int(np.argmax(sims[r]))  # first max: lowest index wins ties
        self._rng = rng or np.random.default_rng(0)
        self._n = n
        self._warned = False

    def similar_item(self, item: int) -> int:
        """argmax cosine over all other items; never returns the query."""
        if not 0 <= item < self._n:
            raise IndexError(f"item id {item} out of range [0, {self._n})")
        hit = int(self.nearest[item])
        if hit >= 0:
            return hit
        # Degenerate table (all candidates zero-norm): uniform fallback.
        if not self._warned:
            log.warning("similar_item: no nonzero candidate rows, sampling uniformly")
            self._warned = True
        choice = int(self._rng.integers(self._n - 1))
        return choice + 1 if choice >= item else choice


def similar_item(exposure_table: np.ndarray, item: int, rng: np.random.Generator | None = None) -> int:
    """One-off exact similar-item query (builds a throwaway cache)."""
    return SimilarityCache(exposure_table, rng=rng).similar_item(item)


def popular_item(
    index: PopularityIndex,
    item: int,
    t: float,
    k: int,
    tau: float,
    rng: np.random.Generator,
) -> int:
    """Uniform draw from the windowed top-k items, excluding ``item``.

    The ranked list is extended by one so the exclusion cannot empty a
    full top-k; an empty window falls back to the all-time top-k.
    """
    ranked = index.topk(t, k + 1, tau)
    if ranked.size == 0:
        log.warning("popular_item: empty window at t=%s, falling back to global counts", t)
        ranked = index.global_topk(k + 1)
    support = ranked[ranked != item][:k]
    if support.size == 0:
        raise SamplingError(f"no popular candidates besides item {item}")
    return int(support[rng.integers(support.size)])


def popular_support(index: PopularityIndex, item: int, t: float, k: int, tau: float) -> np.ndarray:
    """The exact support set :func:`popular_item` samples from."""
    ranked = index.topk(t, k + 1, tau)
    if ranked.size == 0:
        ranked = index.global_topk(k + 1)
    return ranked[ranked != item][:k]


def perturb_time(t_embed: np.ndarray, rng: np.random.Generator, bound: float = 1e-4) -> np.ndarray:
    """Add a coordinate-wise uniform perturbation in [-bound, bound]."""
    t_embed = np.asarray(t_embed, dtype=np.float64)
    return t_embed + sample_delta(rng, t_embed.size, bound).reshape(t_embed.shape)


def sample_delta(rng: np.random.Generator, dim: int, bound: float = 1e-4) -> np.ndarray:
    return rng.uniform(-bound, bound, dim)


def build_triple(
    sim_cache: SimilarityCache,
    pop_index: PopularityIndex,
    item: int,
    t: float,
    cfg: CounterfactualConfig,
    rng: np.random.Generator,
    dim: int,
    pop_ranked: np.ndarray | None = None,
) -> CounterfactualTriple:
    """Assemble the three counterfactuals for one factual (item, t).

    ``pop_ranked`` may carry a precomputed ranked top-(k+1) list for ``t``
    (from :meth:`PopularityIndex.topk_sweep`); otherwise it is queried.
    """
    if pop_ranked is None:
        pop = popular_item(pop_index, item, t, cfg.top_k, cfg.window_seconds, rng)
    else:
        ranked = pop_ranked
        if ranked.size == 0:
            ranked = pop_index.global_topk(cfg.top_k + 1)
        support = ranked[ranked != item][: cfg.top_k]
        if support.size == 0:
            raise SamplingError(f"no popular candidates besides item {item}")
        pop = int(support[rng.integers(support.size)])
    return CounterfactualTriple(
        sim_item=sim_cache.similar_item(item),
        pop_item=pop,
        delta=sample_delta(rng, dim, cfg.delta_bound),
    )


def sample_negative_pairs(
    pos_pairs: set[tuple[int, float]],
    n_items: int,
    span: tuple[float, float],
    count: int,
    rng: np.random.Generator,
    max_tries_per_sample: int = 50,
) -> tuple[np.ndarray, np.ndarray]:
    """Rejection-sample (item, timestamp) pairs disjoint from the positives.

    Items are uniform over the vocabulary, timestamps uniform over the
    training span. Exhausting the retry budget raises SamplingError (only
    plausible for pathologically tiny vocabularies with a zero-width span).
    """
    items = np.empty(count, dtype=np.int64)
    times = np.empty(count, dtype=np.float64)
    lo, hi = span
    for i in range(count):
        for _ in range(max_tries_per_sample):
            v = int(rng.integers(n_items))
            t = float(lo if hi <= lo else rng.uniform(lo, hi))
            if (v, t) not in pos_pairs:  # negatives may repeat; only the
                items[i] = v             # positive set must stay disjoint
                times[i] = t
                break
        else:
            raise SamplingError(
                f"could not draw {count} negative pairs disjoint from {len(pos_pairs)} positives "
                f"(|V|={n_items}, span={span})"
            )
    return items, times


def build_sample_sets(
    item: int,
    t: float,
    gap: float,
    triple: CounterfactualTriple,
    n_items: int,
    span: tuple[float, float],
    cfg: CounterfactualConfig,
    rng: np.random.Generator,
    gap_of_time,
) -> ExposureSampleSets:
    """Exposure positives and negatives for one factual interaction.

    Positives are the factual pair plus the three counterfactuals (4 pairs,
    all at the factual timestamp ``t`` for disjointness purposes); negatives
    are ``negative_ratio * 4`` rejection-sampled pairs whose gap is measured
    from the example's last history timestamp (``gap_of_time`` maps a raw
    timestamp to a normalized gap).
    """
    pos_items = np.array([item, triple.sim_item, triple.pop_item, item], dtype=np.int64)
    pos_gaps = np.array([gap, gap, gap, gap], dtype=np.float64)
    pos_pairs = {(int(v), float(t)) for v in pos_items}
    neg_items, neg_times = sample_negative_pairs(
        pos_pairs, n_items, span, cfg.negative_ratio * 4, rng
    )
    neg_gaps = np.array([gap_of_time(t) for t in neg_times], dtype=np.float64)
    return ExposureSampleSets(
        pos_items=pos_items,
        pos_gaps=pos_gaps,
        delta=triple.delta,
        neg_items=neg_items,
        neg_gaps=neg_gaps,
        neg_times=neg_times,
    )
