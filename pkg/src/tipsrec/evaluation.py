"""Ranking evaluation (HR@K, NDCG@K) under the sampled-negatives protocol,
plus propensity-gap analysis."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import GapNormalizer, SplitSpec, interacted_items
from .exposure import squash
from .model import TipsModel
from .recommender import rank_of, score_many
from .training import StaticPropensity


@dataclass(frozen=True)
class EvalProtocol:
    cutoffs: tuple[int, ...] = (5, 10)
    n_negatives: int = 99
    seed: int = 2024


@dataclass
class EvalCase:
    user: int
    hist_items: np.ndarray
    hist_gaps: np.ndarray
    pos_item: int
    pos_gap: float
    negatives: np.ndarray


@dataclass
class MetricReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    n_users: int
    n_skipped: int
    protocol: EvalProtocol
    prop_gap_mean: float | None = None
    prop_gaps: list[float] = field(default_factory=list)

    def to_json(self, extra: dict | None = None) -> str:
        """Canonical JSON; identical configs and seeds give identical bytes."""
        payload = {
            "hr": {str(k): v for k, v in sorted(self.hr.items())},
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
            "n_users": self.n_users,
            "n_skipped": self.n_skipped,
            "protocol": {
                "cutoffs": list(self.protocol.cutoffs),
                "n_negatives": self.protocol.n_negatives,
                "seed": self.protocol.seed,
            },
            "prop_gap_mean": self.prop_gap_mean,
        }
        payload.update(extra or {})
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def ndcg_contribution(rank: int, k: int) -> float:
    """Single-relevant-item NDCG term: 1/log2(rank + 1) inside the cutoff."""
    return 1.0 / np.log2(rank + 1.0) if rank <= k else 0.0


def negative_pool(n_items: int, excluded: set[int]) -> np.ndarray:
    mask = np.ones(n_items, dtype=bool)
    for v in excluded:
        if 0 <= v < n_items:
            mask[v] = False
    return np.flatnonzero(mask)


def sample_negatives(pool: np.ndarray, protocol: EvalProtocol, user: int) -> np.ndarray:
    rng = np.random.default_rng([protocol.seed, int(user)])
    take = min(protocol.n_negatives, pool.size)
    return np.sort(rng.choice(pool, size=take, replace=False))


def eval_cases_from_splits(
    split: SplitSpec,
    normalizer: GapNormalizer,
    protocol: EvalProtocol,
    stage: str = "test",
) -> list[EvalCase]:
    """Leave-one-out cases: validation ranks the second-to-last item against
    the train history; test ranks the last item with the validation item
    appended to the history."""
    if stage not in ("val", "test"):
        raise ValueError(f"stage must be val or test, got {stage!r}")
    cases = []
    for u in split.users:
        if stage == "val":
            hist_items, hist_times = u.train_items, u.train_times
            pos, pos_time = u.val_item, u.val_time
        else:
            hist_items = np.concatenate([u.train_items, [u.val_item]])
            hist_times = np.concatenate([u.train_times, [u.val_time]])
            pos, pos_time = u.test_item, u.test_time
        pool = negative_pool(split.n_items, interacted_items(u))
        if pool.size == 0:
            continue
        cases.append(
            EvalCase(
                user=u.user,
                hist_items=hist_items,
                hist_gaps=normalizer.normalize_gaps(hist_times),
                pos_item=int(pos),
                pos_gap=float(normalizer.transform([max(pos_time - hist_times[-1], 0.0)])[0]),
                negatives=sample_negatives(pool, protocol, u.user),
            )
        )
    return cases


def evaluate(model: TipsModel, cases: list[EvalCase], protocol: EvalProtocol, with_gaps: bool = True) -> MetricReport:
    """Rank each case's positive among its sampled negatives.

    With an exposure estimator present (and ``with_gaps``), also records the
    per-user propensity gap: s(positive) minus the mean s over negatives,
    all queried at the positive's time."""
    hits = {k: 0 for k in protocol.cutoffs}
    gains = {k: 0.0 for k in protocol.cutoffs}
    gaps: list[float] = []
    n = 0
    skipped = 0
    with ad.no_grad():
        for case in cases:
            if len(case.hist_items) == 0 or case.negatives.size == 0:
                skipped += 1
                continue
            seq = model.fused(case.hist_items, case.hist_gaps)
            u = model.user_vector(seq)
            candidates = np.concatenate([[case.pos_item], case.negatives])
            scores = score_many(u, model.embeddings, candidates).value.reshape(-1)
            r = rank_of(case.pos_item, scores, candidates)
            for k in protocol.cutoffs:
                if r <= k:
                    hits[k] += 1
                    gains[k] += ndcg_contribution(r, k)
            if with_gaps and model.exposure is not None:
                raws = model.raw_propensity_scores(
                    seq, candidates, np.full(candidates.size, case.pos_gap)
                ).value.reshape(-1)
                s = np.array([squash(v) for v in raws])
                gaps.append(float(s[0] - s[1:].mean()))
            n += 1
    if n == 0:
        raise ValueError("no evaluable cases")
    return MetricReport(
        hr={k: hits[k] / n for k in protocol.cutoffs},
        ndcg={k: gains[k] / n for k in protocol.cutoffs},
        n_users=n,
        n_skipped=skipped,
        protocol=protocol,
        prop_gap_mean=float(np.mean(gaps)) if gaps else None,
        prop_gaps=[float(g) for g in gaps],
    )


def hr_at(model: TipsModel, cases: list[EvalCase], protocol: EvalProtocol, k: int = 10) -> float:
    """Cheap validation metric (no gap analysis)."""
    report = evaluate(model, cases, protocol, with_gaps=False)
    return report.hr[k]


def static_propensity_gaps(static: StaticPropensity, cases: list[EvalCase]) -> np.ndarray:
    """Per-user gap under the global popularity estimate (the static baseline)."""
    out = []
    for case in cases:
        p_pos = static.prob(case.pos_item)
        p_neg = float(np.mean([static.prob(int(v)) for v in case.negatives]))
        out.append(p_pos - p_neg)
    return np.asarray(out)


def model_propensity_gaps(model: TipsModel, cases: list[EvalCase]) -> np.ndarray:
    """Per-user gap under the trained time-aware estimator."""
    if model.exposure is None:
        raise ValueError("model has no exposure estimator")
    out = []
    with ad.no_grad():
        for case in cases:
            if len(case.hist_items) == 0:
                continue
            seq = model.fused(case.hist_items, case.hist_gaps)
            candidates = np.concatenate([[case.pos_item], case.negatives])
            raws = model.raw_propensity_scores(
                seq, candidates, np.full(candidates.size, case.pos_gap)
            ).value.reshape(-1)
            s = np.array([squash(v) for v in raws])
            out.append(float(s[0] - s[1:].mean()))
    return np.asarray(out)


def histogram_csv(values: np.ndarray, n_bins: int = 20, lo: float | None = None, hi: float | None = None) -> str:
    """Bin data as CSV (bin_left, bin_right, count) for external plotting."""
    values = np.asarray(values, dtype=np.float64)
    lo = float(values.min()) if lo is None else lo
    hi = float(values.max()) if hi is None else hi
    if hi <= lo:
        hi = lo + 1e-12
    counts, edges = np.histogram(values, bins=n_bins, range=(lo, hi))
    lines = ["bin_left,bin_right,count"]
    for i, c in enumerate(counts):
        lines.append(f"{edges[i]!r},{edges[i + 1]!r},{int(c)}")
    return "\n".join(lines) + "\n"
