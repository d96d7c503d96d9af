"""Composition of encoders, exposure estimator and backbone into one model.

Mode switches control which components exist: ablations without time drop
the gap MLP entirely, and ablations without exposure estimation feed the
plain fused sequence to the backbone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamRegistry, Tensor
from .encoders import DualItemEmbeddings, FusedSequence, TimeEmbedder, exposure_query, fuse_sequence
from .exposure import AttentionConfig, ExposureEstimator, PropensityScore
from .recommender import Backbone, make_backbone

MODES = ("tips", "no_time", "no_ips", "static_ips", "none")


def mode_uses_time(mode: str) -> bool:
    return mode in ("tips", "no_ips")


def mode_uses_exposure(mode: str) -> bool:
    return mode in ("tips", "no_time", "no_ips")


def mode_uses_counterfactuals(mode: str) -> bool:
    # Counterfactual construction belongs to the exposure apparatus; the
    # static-IPS and plain baselines rank against uniform random negatives.
    return mode_uses_exposure(mode)


@dataclass
class ModelConfig:
    dim: int = 64
    heads: int = 2
    max_len: int = 50
    backbone: str = "attention"
    mode: str = "tips"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        AttentionConfig(heads=self.heads, dim=self.dim)  # validates divisibility


class TipsModel:
    """All trainable state for one mode, sharing a single ParamRegistry."""

    def __init__(self, n_items: int, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.n_items = n_items
        rng = np.random.default_rng([seed, 0xE0])
        self.registry = ParamRegistry()
        self.embeddings = DualItemEmbeddings(self.registry, n_items, cfg.dim, rng)
        self.time_embedder = TimeEmbedder(self.registry, cfg.dim, rng) if mode_uses_time(cfg.mode) else None
        self.exposure = (
            ExposureEstimator(self.registry, AttentionConfig(cfg.heads, cfg.dim), rng)
            if mode_uses_exposure(cfg.mode)
            else None
        )
        self.backbone: Backbone = make_backbone(cfg.backbone, self.registry, cfg.dim, cfg.heads, rng)

    def fused(self, items, gaps) -> FusedSequence:
        return fuse_sequence(self.embeddings, self.time_embedder, items, gaps, max_len=self.cfg.max_len)

    def query(self, item: int, gap: float, delta: np.ndarray | None = None) -> Tensor:
        return exposure_query(self.embeddings, self.time_embedder, item, gap, delta)

    def queries(self, items, gaps, deltas: dict[int, np.ndarray] | None = None) -> Tensor:
        """Batched exposure queries, one row per (item, gap) pair."""
        items = np.asarray(items, dtype=np.int64).reshape(-1)
        gaps = np.asarray(gaps, dtype=np.float64).reshape(-1)
        if len(items) != len(gaps):
            raise ad.DimensionError(f"queries: {len(items)} items vs {len(gaps)} gaps")
        q = self.embeddings.exposure_rows(items)
        if self.time_embedder is not None:
            q = ad.add(q, self.time_embedder.embed(gaps))
        if deltas:
            bump = np.zeros((len(items), self.cfg.dim))
            for row, delta in deltas.items():
                bump[row] = delta
            q = ad.add(q, ad.constant(bump))
        return q

    def exposure_aware(self, seq: FusedSequence) -> Tensor:
        """Sequence fed to the backbone; candidate-independent by design.

        The query is the last history interaction, never the scored
        candidate, so one user representation serves every candidate and
        evaluation cannot leak the held-out item.
        """
        if self.exposure is None:
            return seq.s
        hist_query = self.query(int(seq.items[-1]), float(seq.gaps[-1]))
        return self.exposure.exposure_aware(seq, hist_query)

    def user_vector(self, seq: FusedSequence) -> Tensor:
        return self.backbone.encode(self.exposure_aware(seq))

    def propensity(self, seq: FusedSequence, item: int, gap: float, delta: np.ndarray | None = None) -> PropensityScore:
        if self.exposure is None:
            raise ValueError(f"mode {self.cfg.mode!r} has no exposure estimator")
        score, _ = self.exposure.propensity(seq, self.query(item, gap, delta))
        return score

    def raw_propensity_scores(self, seq: FusedSequence, items, gaps, deltas=None) -> Tensor:
        if self.exposure is None:
            raise ValueError(f"mode {self.cfg.mode!r} has no exposure estimator")
        return self.exposure.raw_scores(seq, self.queries(items, gaps, deltas))
