"""Synthetic biased-exposure world with known ground truth.

The generative process follows the exposure-gates-clicks causal structure:
a logged policy decides which items each user sees at each step, and clicks
are Bernoulli draws from a latent-factor preference model, possible only on
exposed items. The emitted bundle carries the biased click log (what a
trainee may see), the full exposure log and exact per-step policy
probabilities (evaluation-only oracles), and the true affinity matrix, so
debiasing claims can be verified against ground truth that real datasets
never provide.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import stable_sigmoid
from .data import GapNormalizer, InteractionLog, LogFormat
from .evaluation import EvalCase, EvalProtocol, sample_negatives

POLICIES = ("popularity", "recency", "uniform")

ORACLE_NOTICE = (
    "EVALUATION ONLY: these files reveal the simulator's ground truth\n"
    "(exposure events, policy probabilities, true affinities). Training\n"
    "code must only ever read the biased click log.\n"
)


@dataclass(frozen=True)
class WorldSpec:
    n_users: int = 100
    n_items: int = 50
    latent_dim: int = 8
    policy: str = "popularity"
    skew: float = 2.0
    horizon: int = 50
    slate_size: int = 3
    click_scale: float = 6.0
    click_bias: float = 0.0
    step_seconds: float = 86400.0
    recency_halflife: float = 5.0  # steps; recency policy only

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.n_users < 1 or self.n_items < 2:
            raise ValueError("need at least 1 user and 2 items")
        if self.slate_size < 0 or self.slate_size > self.n_items:
            raise ValueError(f"slate_size must be in [0, n_items], got {self.slate_size}")
        if self.horizon < 0:
            raise ValueError(f"horizon must be nonnegative, got {self.horizon}")


@dataclass
class OracleBundle:
    spec: WorldSpec
    seed: int
    affinity: np.ndarray          # n_users x n_items, true preference logits
    click_prob: np.ndarray        # P(C=1 | E=1, u, v)
    policy_probs: np.ndarray      # horizon x n_items inclusion probabilities
    exposure_events: np.ndarray   # (n, 3) rows of (user, item, step)
    click_events: np.ndarray      # subset of exposure_events with C=1
    release_step: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def timestamps(self, steps: np.ndarray) -> np.ndarray:
        return (steps + 1.0) * self.spec.step_seconds

    def as_interaction_log(self) -> InteractionLog:
        """Biased click log over the FULL item catalog (never-clicked items
        keep their ids so the oracle evaluation can rank them)."""
        spec = self.spec
        users, items, steps = self.click_events.T if len(self.click_events) else (np.empty(0, int),) * 3
        times = self.timestamps(steps.astype(np.float64)) if len(self.click_events) else np.empty(0)
        user_items = [items[users == u].astype(np.int64) for u in range(spec.n_users)]
        user_times = [times[users == u] for u in range(spec.n_users)]
        for u in range(spec.n_users):
            order = np.argsort(user_times[u], kind="stable")
            user_items[u] = user_items[u][order]
            user_times[u] = user_times[u][order]
        return InteractionLog(
            n_users=spec.n_users,
            n_items=spec.n_items,
            user_labels=[str(u) for u in range(spec.n_users)],
            item_labels=[str(v) for v in range(spec.n_items)],
            user_items=user_items,
            user_times=user_times,
        )

    def clicked_sets(self) -> list[set[int]]:
        out = [set() for _ in range(self.spec.n_users)]
        for u, v, _ in self.click_events:
            out[int(u)].add(int(v))
        return out


def _scale_to_slate(weights: np.ndarray, slate: float) -> np.ndarray:
    """Inclusion probabilities proportional to weights, summing to the slate
    size, iteratively clipping at 1 and redistributing the excess."""
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if slate <= 0 or total <= 0:
        return np.zeros_like(w)
    p = np.minimum(w / total * slate, 1.0)
    for _ in range(64):
        deficit = slate - p.sum()
        if deficit <= 1e-12:
            break
        room = (p < 1.0) & (w > 0)
        if not room.any():
            break
        bump = w * room
        p = np.minimum(p + bump / bump.sum() * deficit, 1.0)
    return p


def _policy_weights(spec: WorldSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-step item weights (horizon x n_items) and item release steps.

    The popularity policy is trending popularity: each item carries a mild
    static base plus a rotating boost with a private phase, so at every
    step a subset of items is heavily over-exposed while long-run average
    exposure stays comparatively flat. ``skew`` scales the instantaneous
    log-weight amplitude (and the static base's spread at a quarter of it).
    """
    release = np.zeros(spec.n_items, dtype=np.int64)
    if spec.policy == "uniform":
        w = np.ones((spec.horizon, spec.n_items))
    elif spec.policy == "popularity":
        base = np.exp(0.25 * spec.skew * rng.normal(0.0, 1.0, spec.n_items))
        phase = rng.uniform(0.0, 1.0, spec.n_items)
        period = max(spec.horizon / 2.0, 1.0)
        steps = np.arange(spec.horizon)[:, None]
        trend = np.exp(spec.skew * np.cos(2.0 * np.pi * (steps / period - phase[None, :])))
        w = base[None, :] * trend
    else:  # recency
        if spec.horizon > 0:
            release = rng.integers(0, max(int(spec.horizon * 0.7), 1), spec.n_items)
            release[rng.integers(spec.n_items)] = 0  # something exists at t=0
        steps = np.arange(spec.horizon)[:, None]
        age = steps - release[None, :]
        w = np.where(age >= 0, np.exp2(-np.maximum(age, 0) / spec.recency_halflife), 0.0)
        w = w ** spec.skew
    return w, release


def simulate(spec: WorldSpec, seed: int) -> OracleBundle:
    """Run the world: per step the policy exposes a slate per user and
    clicks are conditionally independent Bernoulli draws on exposed items."""
    rng = np.random.default_rng([seed, 0x51])
    u_lat = rng.normal(0.0, 1.0 / np.sqrt(spec.latent_dim), (spec.n_users, spec.latent_dim))
    v_lat = rng.normal(0.0, 1.0 / np.sqrt(spec.latent_dim), (spec.n_items, spec.latent_dim))
    affinity = u_lat @ v_lat.T
    click_prob = stable_sigmoid(spec.click_scale * affinity + spec.click_bias)

    weights, release = _policy_weights(spec, rng)
    policy_probs = np.zeros((spec.horizon, spec.n_items))
    exp_rows, click_rows = [], []
    for t in range(spec.horizon):
        pi = _scale_to_slate(weights[t], spec.slate_size)
        policy_probs[t] = pi
        exposed = rng.random((spec.n_users, spec.n_items)) < pi[None, :]
        clicked = exposed & (rng.random((spec.n_users, spec.n_items)) < click_prob)
        eu, ev = np.nonzero(exposed)
        cu, cv = np.nonzero(clicked)
        exp_rows.append(np.column_stack([eu, ev, np.full(eu.size, t)]))
        click_rows.append(np.column_stack([cu, cv, np.full(cu.size, t)]))

    exposure_events = np.concatenate(exp_rows) if exp_rows else np.empty((0, 3), dtype=np.int64)
    click_events = np.concatenate(click_rows) if click_rows else np.empty((0, 3), dtype=np.int64)

    # SCM edge: clicks only ever happen on exposed (user, item, step) triples.
    exposed_keys = {tuple(r) for r in exposure_events.tolist()}
    assert all(tuple(r) in exposed_keys for r in click_events.tolist()), "click outside exposure"

    return OracleBundle(
        spec=spec,
        seed=seed,
        affinity=affinity,
        click_prob=click_prob,
        policy_probs=policy_probs,
        exposure_events=exposure_events.astype(np.int64),
        click_events=click_events.astype(np.int64),
        release_step=release,
    )


def unbiased_testset(bundle: OracleBundle, per_user_positives: int = 1) -> dict[int, list[int]]:
    """Per user, the top-affinity items absent from the biased click log.

    Users whose every item was clicked are skipped. These positives are the
    ground-truth targets no biased protocol can produce."""
    clicked = bundle.clicked_sets()
    out: dict[int, list[int]] = {}
    for u in range(bundle.spec.n_users):
        order = np.argsort(-bundle.affinity[u], kind="stable")
        held = [int(v) for v in order if int(v) not in clicked[u]][:per_user_positives]
        if held:
            out[u] = held
    return out


def unbiased_eval_cases(
    bundle: OracleBundle,
    log: InteractionLog,
    normalizer: GapNormalizer,
    protocol: EvalProtocol,
    per_user_positives: int = 1,
) -> list[EvalCase]:
    """Rank ground-truth positives against negatives sampled outside the
    user's clicks; history is the user's full biased sequence."""
    positives = unbiased_testset(bundle, per_user_positives)
    clicked = bundle.clicked_sets()
    end_time = (bundle.spec.horizon + 1.0) * bundle.spec.step_seconds
    cases = []
    for u, pos_list in positives.items():
        items, times = log.user_items[u], log.user_times[u]
        if len(items) == 0:
            continue
        gaps = normalizer.normalize_gaps(times)
        pool_excl = clicked[u] | set(pos_list)
        mask = np.ones(bundle.spec.n_items, dtype=bool)
        for v in pool_excl:
            mask[v] = False
        pool = np.flatnonzero(mask)
        if pool.size == 0:
            continue
        for pos in pos_list:
            cases.append(
                EvalCase(
                    user=u,
                    hist_items=items,
                    hist_gaps=gaps,
                    pos_item=pos,
                    pos_gap=float(normalizer.transform([max(end_time - times[-1], 0.0)])[0]),
                    negatives=sample_negatives(pool, protocol, u),
                )
            )
    return cases


def calibration_samples(
    bundle: OracleBundle,
    log: InteractionLog,
    normalizer: GapNormalizer,
    n_users: int,
    n_per_user: int,
    rng: np.random.Generator,
    max_len: int,
) -> list[tuple[np.ndarray, np.ndarray, int, float, float]]:
    """Random (user, item, step) probes with their TRUE policy probability.

    Each entry is (hist_items, hist_gaps, item, gap, true_prob) where the
    history is the user's clicks strictly before the probed step. Used to
    rank-correlate estimated propensities against the logged ground truth.
    """
    spec = bundle.spec
    eligible = [u for u in range(spec.n_users) if len(log.user_items[u]) >= 2]
    if not eligible:
        return []
    users = rng.choice(eligible, size=min(n_users, len(eligible)), replace=False)
    out = []
    for u in users:
        items, times = log.user_items[u], log.user_times[u]
        gaps = normalizer.normalize_gaps(times)
        for _ in range(n_per_user):
            step = int(rng.integers(1, spec.horizon)) if spec.horizon > 1 else 0
            t = bundle.timestamps(np.asarray([step], dtype=np.float64))[0]
            n_hist = int(np.searchsorted(times, t, side="right"))
            if n_hist == 0:
                continue
            lo = max(0, n_hist - max_len)
            v = int(rng.integers(spec.n_items))
            gap = float(normalizer.transform([max(t - times[n_hist - 1], 0.0)])[0])
            out.append((items[lo:n_hist], gaps[lo:n_hist], v, gap, float(bundle.policy_probs[step, v])))
    return out


# ---------------------------------------------------------------------------
# artifacts


def write_dataset(bundle: OracleBundle, out_dir: str | Path) -> dict[str, Path]:
    """Write the biased log (training input) and the oracle artifacts."""
    out_dir = Path(out_dir)
    oracle_dir = out_dir / "oracle"
    oracle_dir.mkdir(parents=True, exist_ok=True)

    paths = {
        "biased_log": out_dir / "biased_log.tsv",
        "item_vocab": out_dir / "items.tsv",
        "exposure_log": oracle_dir / "exposure_log.tsv",
        "policy_probs": oracle_dir / "policy_probs.csv",
        "affinity": oracle_dir / "affinity.npy",
        "notice": oracle_dir / "README.txt",
    }

    fmt = LogFormat()
    log = bundle.as_interaction_log()
    with open(paths["biased_log"], "w") as fh:
        for u_label, v_label, ts in log.to_records():
            fh.write(fmt.delimiter.join([u_label, v_label, str(int(ts))]) + "\n")
    with open(paths["item_vocab"], "w") as fh:
        for label in log.item_labels:
            fh.write(label + "\n")
    with open(paths["exposure_log"], "w") as fh:
        for u, v, step in bundle.exposure_events:
            ts = int((step + 1) * bundle.spec.step_seconds)
            fh.write(fmt.delimiter.join([str(u), str(v), str(ts)]) + "\n")
    with open(paths["policy_probs"], "w") as fh:
        fh.write("step," + ",".join(f"item_{v}" for v in range(bundle.spec.n_items)) + "\n")
        for t in range(bundle.spec.horizon):
            fh.write(str(t) + "," + ",".join(repr(float(p)) for p in bundle.policy_probs[t]) + "\n")
    np.save(paths["affinity"], bundle.affinity)
    paths["notice"].write_text(ORACLE_NOTICE)
    return paths
