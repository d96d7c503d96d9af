"""Joint training objective and loop: time-decayed inverse-propensity BPR
plus the exposure BCE term, with the ablation mode switches and the static
inverse-popularity baseline."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import counterfactual as cf
from .autodiff import Tensor
from .data import GapNormalizer, PopularityIndex, SplitSpec
from .exposure import exposure_loss, squash
from .model import ModelConfig, TipsModel, mode_uses_counterfactuals, mode_uses_exposure, mode_uses_time

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Objective and loop settings; mode selects the ablation variant."""

    mode: str = "tips"
    mu: float = 0.5
    gamma: float = 0.3
    epsilon: float = 0.05
    negative_ratio: int = 1
    lr: float = 5e-5
    batch_size: int = 16
    epochs: int = 10
    optimizer: str = "sgd"
    top_k: int = 10
    window_seconds: float = 30 * 86400.0
    delta_bound: float = 1e-4
    targets_per_user: int = 0  # 0 = every position
    smoothing_alpha: float = 1.0
    seed: int = 7

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError(f"decay rate mu must be positive, got {self.mu}")
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError(f"propensity floor epsilon must be in (0, 0.5), got {self.epsilon}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam, got {self.optimizer!r}")

    def counterfactual_config(self) -> cf.CounterfactualConfig:
        return cf.CounterfactualConfig(
            top_k=self.top_k,
            window_seconds=self.window_seconds,
            delta_bound=self.delta_bound,
            negative_ratio=self.negative_ratio,
        )


def tips_weight(dt_norm: float, s: float, mu: float, epsilon: float) -> float:
    """Time-decayed inverse propensity weight exp(-mu dt) / max(s, eps)."""
    if dt_norm < 0:
        raise ValueError(f"normalized gap must be nonnegative, got {dt_norm}")
    if not 0.0 < s < 1.0:
        raise ValueError(f"propensity must lie strictly in (0, 1), got {s}")
    return float(np.exp(-mu * dt_norm) / max(s, epsilon))


class StaticPropensity:
    """Smoothed global exposure-frequency estimate and its inverse weight."""

    def __init__(self, index: PopularityIndex, alpha: float = 1.0):
        counts = index.global_counts().astype(np.float64) + alpha
        self.probs = counts / counts.sum()

    def prob(self, item: int) -> float:
        return float(self.probs[item])

    def weight(self, item: int) -> float:
        return float(1.0 / self.probs[item])


# ---------------------------------------------------------------------------
# examples and per-epoch plans


@dataclass
class TrainExample:
    user: int
    hist_items: np.ndarray
    hist_gaps: np.ndarray
    item: int
    t: float
    gap: float
    prev_time: float


@dataclass
class ExamplePlan:
    """One example with every random choice already drawn (deterministic
    graph construction afterwards, which the gradient checker relies on)."""

    ex: TrainExample
    bpr_neg_items: np.ndarray
    sets: cf.ExposureSampleSets | None = None


def build_examples(split: SplitSpec, normalizer: GapNormalizer, targets_per_user: int = 0) -> list[TrainExample]:
    """One example per (user, target position) over the train sequences."""
    out: list[TrainExample] = []
    for u in split.users:
        items, times = u.train_items, u.train_times
        if len(items) < 2:
            continue
        gaps = normalizer.normalize_gaps(times)
        positions = range(1, len(items))
        if targets_per_user > 0:
            positions = list(positions)[-targets_per_user:]
        for i in positions:
            out.append(
                TrainExample(
                    user=u.user,
                    hist_items=items[:i],
                    hist_gaps=gaps[:i],
                    item=int(items[i]),
                    t=float(times[i]),
                    gap=float(gaps[i]),
                    prev_time=float(times[i - 1]),
                )
            )
    return out


def plan_epoch(
    examples: list[TrainExample],
    model: TipsModel,
    index: PopularityIndex,
    normalizer: GapNormalizer,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> list[ExamplePlan]:
    """Draw all per-epoch randomness: counterfactual triples, exposure
    negatives and (for the baselines) uniform ranking negatives."""
    ccfg = cfg.counterfactual_config()
    if not mode_uses_counterfactuals(model.cfg.mode):
        plans = []
        for ex in examples:
            negs = []
            while len(negs) < 3:
                v = int(rng.integers(model.n_items))
                if v != ex.item:
                    negs.append(v)
            plans.append(ExamplePlan(ex=ex, bpr_neg_items=np.asarray(negs, dtype=np.int64)))
        return plans

    sim_cache = cf.SimilarityCache(model.embeddings.exposure.value, rng=rng)
    times = np.asarray([ex.t for ex in examples])
    ranked_lists = index.topk_sweep(times, ccfg.top_k, ccfg.window_seconds)
    span = index.span
    plans = []
    for ex, ranked in zip(examples, ranked_lists):
        triple = cf.build_triple(sim_cache, index, ex.item, ex.t, ccfg, rng, model.cfg.dim, pop_ranked=ranked)
        sets = cf.build_sample_sets(
            ex.item,
            ex.t,
            ex.gap,
            triple,
            model.n_items,
            span,
            ccfg,
            rng,
            gap_of_time=lambda t, p=ex.prev_time: float(normalizer.transform([max(t - p, 0.0)])[0]),
        )
        # The triple doubles as the ranking negatives (exposed, unclicked).
        plans.append(
            ExamplePlan(
                ex=ex,
                bpr_neg_items=np.asarray([triple.sim_item, triple.pop_item, ex.item], dtype=np.int64),
                sets=sets,
            )
        )
    return plans


# ---------------------------------------------------------------------------
# loss assembly


@dataclass
class BatchLoss:
    total: Tensor
    bpr: float
    ep: float
    frozen: dict


def build_batch_loss(
    model: TipsModel,
    plans: list[ExamplePlan],
    cfg: TrainConfig,
    static: StaticPropensity | None = None,
    frozen: dict | None = None,
) -> BatchLoss:
    """Assemble the joint objective for one batch of example plans.

    Propensities entering the BPR weights and the batch normalizer are
    detached scalars: the recommender must not be able to game its own
    weights, and the exposure model trains only through the BCE term and
    the exposure-aware sequence. ``frozen`` replays previously captured
    weights/normalizer so a finite-difference oracle differentiates the
    exact function one optimizer step descends.
    """
    if not plans:
        raise ValueError("empty batch")
    mode = model.cfg.mode
    use_exposure = mode_uses_exposure(mode)
    if mode == "static_ips" and static is None:
        raise ValueError("static_ips mode needs a StaticPropensity")

    pair_terms: list[Tensor] = []
    pos_raw_parts: list[Tensor] = []
    neg_raw_parts: list[Tensor] = []
    weights: list[float] = []
    s_factuals: list[float] = []
    n_pairs = 0

    for plan_idx, plan in enumerate(plans):
        ex = plan.ex
        seq = model.fused(ex.hist_items, ex.hist_gaps)

        s_fact = None
        if use_exposure:
            sets = plan.sets
            items = np.concatenate([sets.pos_items, sets.neg_items])
            gaps = np.concatenate([sets.pos_gaps, sets.neg_gaps])
            raws = model.raw_propensity_scores(seq, items, gaps, deltas={3: sets.delta})
            pos_raw_parts.append(ad.take_rows(raws, list(range(4))))
            neg_raw_parts.append(ad.take_rows(raws, list(range(4, len(items)))))
            s_fact = squash(float(raws.value[0, 0]))
            s_factuals.append(s_fact)

        if frozen is not None:
            w = frozen["weights"][plan_idx]
        elif mode == "tips":
            w = tips_weight(ex.gap, s_fact, cfg.mu, cfg.epsilon)
        elif mode == "no_time":
            w = 1.0 / max(s_fact, cfg.epsilon)
        elif mode == "static_ips":
            w = static.weight(ex.item)
        else:  # no_ips, none
            w = 1.0
        weights.append(w)

        u = model.user_vector(seq)
        y = ad.transpose(ad.matmul(u, ad.transpose(model.embeddings.interaction_rows(
            np.concatenate([[ex.item], plan.bpr_neg_items])))))
        y_pos = ad.take_rows(y, [0])
        y_negs = ad.take_rows(y, list(range(1, y.rows)))
        diffs = ad.add_row(ad.neg(y_negs), y_pos)  # y_pos - y_neg per negative
        pair_terms.append(ad.scale(ad.sum_all(ad.log_sigmoid(diffs)), w))
        n_pairs += y_negs.rows

    if frozen is not None:
        denom = frozen["denom"]
    elif mode in ("tips", "no_time"):
        denom = float(sum(s_factuals))
    else:
        denom = float(len(plans))

    bpr = ad.scale(ad.add_n(pair_terms), -1.0 / (n_pairs * denom))

    ep_value = 0.0
    total = bpr
    if use_exposure and cfg.gamma > 0:
        ep = exposure_loss(ad.concat_rows(pos_raw_parts), ad.concat_rows(neg_raw_parts))
        ep_value = ep.item()
        total = ad.add(bpr, ad.scale(ep, cfg.gamma))

    return BatchLoss(
        total=total,
        bpr=bpr.item(),
        ep=ep_value,
        frozen={"weights": weights, "denom": denom},
    )


def full_objective_grad_check(
    model: TipsModel,
    plans: list[ExamplePlan],
    cfg: TrainConfig,
    static: StaticPropensity | None = None,
    tolerance: float = 1e-4,
    step: float = 1e-5,
) -> ad.GradCheckReport:
    """Check every parameter's analytic gradient of the joint objective.

    The detached IPS weights and normalizer are captured once at the base
    point and replayed inside the closure, so central differences probe the
    same (stop-gradient) function the optimizer descends; everything else,
    including the exposure-aware sequence and the BCE term, stays live.
    """
    base = build_batch_loss(model, plans, cfg, static=static)
    frozen = base.frozen

    def closure():
        return build_batch_loss(model, plans, cfg, static=static, frozen=frozen).total

    return ad.grad_check(closure, model.registry, tolerance=tolerance, step=step)


def bpr_tips_reference(weights, score_diffs, denom) -> float:
    """Scalar brute-force of the weighted pairwise loss, for oracle tests."""
    weights = np.asarray(weights, dtype=np.float64)
    diffs = np.asarray(score_diffs, dtype=np.float64)
    ll = np.log(ad.stable_sigmoid(diffs))
    return float(-(weights * ll).sum() / (diffs.size * denom))


# ---------------------------------------------------------------------------
# optimizers


class Sgd:
    def __init__(self, registry, lr: float):
        self.registry = registry
        self.lr = lr

    def step(self):
        for t in self.registry.tensors():
            if t.trainable:
                t.value -= self.lr * t.grad


class Adam:
    def __init__(self, registry, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.registry = registry
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v.value) for k, v in registry.items()}
        self.v = {k: np.zeros_like(v.value) for k, v in registry.items()}
        self.t = 0

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.registry.items():
            if not p.trainable:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            p.value -= self.lr * (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c) + self.eps)


def make_optimizer(kind: str, registry, lr: float):
    return Adam(registry, lr) if kind == "adam" else Sgd(registry, lr)


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    model: TipsModel
    history: list[dict] = field(default_factory=list)
    best_state: dict | None = None
    best_val_hr10: float = float("nan")
    static: StaticPropensity | None = None
    normalizer: GapNormalizer | None = None

    def restore_best(self):
        if self.best_state is not None:
            self.model.registry.load_state_dict(self.best_state)


def train(
    split: SplitSpec,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    val_fn=None,
) -> TrainResult:
    """Fit one model on a leave-one-out split.

    ``val_fn(model) -> float`` computes validation HR@10 for checkpoint
    selection; when omitted the final state is kept. History records one
    row per epoch: losses, validation metric and gradient norm.
    """
    if model_cfg.mode != cfg.mode:
        raise ValueError(f"model mode {model_cfg.mode!r} != train mode {cfg.mode!r}")
    normalizer = GapNormalizer.fit_from_splits(split)
    index = PopularityIndex.from_splits(split, split.n_items)
    static = StaticPropensity(index, cfg.smoothing_alpha) if cfg.mode == "static_ips" else None
    model = TipsModel(split.n_items, model_cfg, cfg.seed)
    examples = build_examples(split, normalizer, cfg.targets_per_user)
    if not examples:
        raise ValueError("no training examples (all users too short?)")

    optimizer = make_optimizer(cfg.optimizer, model.registry, cfg.lr)
    result = TrainResult(model=model, static=static, normalizer=normalizer)
    best = -np.inf

    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 0x5EED, epoch])
        plans = plan_epoch(examples, model, index, normalizer, cfg, rng)
        order = rng.permutation(len(plans))
        ep_bpr, ep_ep, ep_total, n_batches = 0.0, 0.0, 0.0, 0
        grad_norm = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [plans[i] for i in order[lo : lo + cfg.batch_size]]
            model.registry.zero_grads()
            try:
                bl = build_batch_loss(model, batch, cfg, static=static)
                ad.backward(bl.total)
            except ad.NumericError as err:
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}: {err}; "
                    f"grad norm {model.registry.grad_norm():.3e}, "
                    f"recent s values {s_summary(model, batch)}"
                ) from err
            grad_norm = model.registry.grad_norm()
            if not np.isfinite(grad_norm):
                raise TrainingDiverged(f"non-finite gradient norm at epoch {epoch}")
            optimizer.step()
            ep_bpr += bl.bpr
            ep_ep += bl.ep
            ep_total += bl.total.item()
            n_batches += 1

        val_hr = float("nan")
        if val_fn is not None:
            val_hr = float(val_fn(model))
            if val_hr > best:
                best = val_hr
                result.best_state = copy.deepcopy(model.registry.state_dict())
                result.best_val_hr10 = val_hr
        result.history.append(
            {
                "epoch": epoch,
                "loss": ep_total / max(n_batches, 1),
                "loss_bpr": ep_bpr / max(n_batches, 1),
                "loss_ep": ep_ep / max(n_batches, 1),
                "val_hr10": val_hr,
                "grad_norm": grad_norm,
            }
        )
        log.info(
            "epoch %d: loss %.4f (bpr %.4f, ep %.4f) val HR@10 %s",
            epoch,
            result.history[-1]["loss"],
            result.history[-1]["loss_bpr"],
            result.history[-1]["loss_ep"],
            f"{val_hr:.4f}" if np.isfinite(val_hr) else "n/a",
        )

    if result.best_state is None:
        result.best_state = copy.deepcopy(model.registry.state_dict())
    return result


def s_summary(model: TipsModel, batch: list[ExamplePlan]) -> str:
    if model.exposure is None:
        return "n/a (no exposure model)"
    vals = []
    with ad.no_grad():
        for plan in batch[:8]:
            seq = model.fused(plan.ex.hist_items, plan.ex.hist_gaps)
            vals.append(model.propensity(seq, plan.ex.item, plan.ex.gap).s)
    arr = np.asarray(vals)
    return f"min {arr.min():.3g} median {np.median(arr):.3g} max {arr.max():.3g}"


def history_to_csv(history: list[dict]) -> str:
    cols = ["epoch", "loss", "loss_bpr", "loss_ep", "val_hr10", "grad_norm"]
    lines = [",".join(cols)]
    for row in history:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols))
    return "\n".join(lines) + "\n"
