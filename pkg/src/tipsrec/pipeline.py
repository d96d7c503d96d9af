"""Config-driven pipelines shared by the CLI and the example scripts."""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import GapNormalizer, InteractionLog, PopularityIndex, SplitSpec, dataset_stats, load_log, make_splits
from .evaluation import (
    EvalProtocol,
    eval_cases_from_splits,
    evaluate,
    histogram_csv,
    hr_at,
    model_propensity_gaps,
    static_propensity_gaps,
)
from .model import ModelConfig, TipsModel, mode_uses_exposure
from .simulator import WorldSpec, simulate, write_dataset
from .training import StaticPropensity, TrainConfig, TrainResult, history_to_csv, train

log = logging.getLogger(__name__)


def model_config(cfg: RunConfig, mode: str | None = None) -> ModelConfig:
    return ModelConfig(
        dim=cfg.dim,
        heads=cfg.heads,
        max_len=cfg.max_len,
        backbone=cfg.backbone,
        mode=mode or cfg.mode,
    )


def train_config(cfg: RunConfig, mode: str | None = None) -> TrainConfig:
    return TrainConfig(
        mode=mode or cfg.mode,
        mu=cfg.mu,
        gamma=cfg.gamma,
        epsilon=cfg.epsilon,
        negative_ratio=cfg.negative_ratio,
        lr=cfg.lr,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        optimizer=cfg.optimizer,
        top_k=cfg.top_k,
        window_seconds=cfg.window_days * 86400.0,
        delta_bound=cfg.delta_bound,
        targets_per_user=cfg.targets_per_user,
        smoothing_alpha=cfg.smoothing_alpha,
        seed=cfg.seed,
    )


def protocol(cfg: RunConfig) -> EvalProtocol:
    return EvalProtocol(cutoffs=cfg.parsed_cutoffs(), n_negatives=cfg.eval_negatives, seed=cfg.protocol_seed)


def artifact_stamp(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed}


def write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def load_dataset(cfg: RunConfig) -> tuple[InteractionLog, SplitSpec, GapNormalizer]:
    if not cfg.dataset_path:
        raise FileNotFoundError("config has no dataset_path")
    fmt = cfg.log_format(cfg.dataset_path)
    logdata = load_log(cfg.dataset_path, fmt, item_vocab=cfg.item_vocab or None)
    split = make_splits(logdata, cfg.max_len)
    normalizer = GapNormalizer.fit_from_splits(split)
    return logdata, split, normalizer


def run_ingest(cfg: RunConfig) -> dict:
    logdata, split, _ = load_dataset(cfg)
    stats = dataset_stats(logdata)
    stats["users_dropped_by_split"] = split.dropped_users
    stats.update(artifact_stamp(cfg))
    write_json(Path(cfg.out_dir) / "stats.json", stats)
    return stats


def run_simulate(cfg: RunConfig) -> dict:
    spec = WorldSpec(
        n_users=cfg.sim_users,
        n_items=cfg.sim_items,
        latent_dim=cfg.sim_latent_dim,
        policy=cfg.sim_policy,
        skew=cfg.sim_skew,
        horizon=cfg.sim_horizon,
        slate_size=cfg.sim_slate,
        click_scale=cfg.sim_click_scale,
        click_bias=cfg.sim_click_bias,
        step_seconds=cfg.sim_step_seconds,
        recency_halflife=cfg.sim_recency_halflife,
    )
    bundle = simulate(spec, cfg.seed)
    paths = write_dataset(bundle, cfg.out_dir)
    summary = {
        "n_exposures": int(len(bundle.exposure_events)),
        "n_clicks": int(len(bundle.click_events)),
        "policy": spec.policy,
        "paths": {k: str(v) for k, v in paths.items()},
    }
    summary.update(artifact_stamp(cfg))
    write_json(Path(cfg.out_dir) / "simulate.json", summary)
    return summary


def checkpoint_prefix(cfg: RunConfig, mode: str | None = None) -> Path:
    return Path(cfg.out_dir) / f"checkpoint_{mode or cfg.mode}"


def run_train(cfg: RunConfig, mode: str | None = None) -> tuple[TrainResult, dict]:
    mode = mode or cfg.mode
    _, split, normalizer = load_dataset(cfg)
    proto = protocol(cfg)
    val_cases = eval_cases_from_splits(split, normalizer, proto, stage="val")
    result = train(
        split,
        model_config(cfg, mode),
        train_config(cfg, mode),
        val_fn=lambda m: hr_at(m, val_cases, proto, k=10),
    )
    result.restore_best()

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prefix = checkpoint_prefix(cfg, mode)
    result.model.registry.save(
        prefix,
        extra={"train_hash": cfg.train_hash(), "mode": mode, **artifact_stamp(cfg)},
    )
    stamp = artifact_stamp(cfg)
    history_path = out / f"history_{mode}.csv"
    history_path.write_text(
        f"# config_hash={stamp['config_hash']} seed={stamp['seed']}\n" + history_to_csv(result.history)
    )
    summary = {
        "mode": mode,
        "best_val_hr10": result.best_val_hr10,
        "epochs": len(result.history),
        "checkpoint": str(prefix),
        "history": str(history_path),
    }
    summary.update(stamp)
    write_json(out / f"train_{mode}.json", summary)
    return result, summary


def load_checkpoint(cfg: RunConfig, prefix: str | Path | None = None, mode: str | None = None) -> TipsModel:
    mode = mode or cfg.mode
    prefix = Path(prefix) if prefix else checkpoint_prefix(cfg, mode)
    if not prefix.with_suffix(".manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint at {prefix}")
    _, split, _ = load_dataset(cfg)
    model = TipsModel(split.n_items, model_config(cfg, mode), cfg.seed)
    extra = model.registry.load(prefix)
    if extra.get("train_hash") != cfg.train_hash():
        raise ValueError(
            f"checkpoint/config mismatch: checkpoint train_hash {extra.get('train_hash')} "
            f"!= config train_hash {cfg.train_hash()}"
        )
    return model


def run_eval(cfg: RunConfig, prefix: str | Path | None = None, stage: str = "test") -> tuple[dict, str]:
    model = load_checkpoint(cfg, prefix)
    _, split, normalizer = load_dataset(cfg)
    proto = protocol(cfg)
    cases = eval_cases_from_splits(split, normalizer, proto, stage=stage)
    report = evaluate(model, cases, proto)
    text = report.to_json(extra={"stage": stage, "mode": cfg.mode, **artifact_stamp(cfg)})
    out = Path(cfg.out_dir) / f"metrics_{cfg.mode}_{stage}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    payload = json.loads(text)
    return payload, text


ABLATION_MODES = ("tips", "no_time", "no_ips", "static_ips")


def run_ablate(cfg: RunConfig) -> dict:
    """Train and test every ablation variant under the shared seed."""
    proto = protocol(cfg)
    rows = []
    base = None
    for mode in ABLATION_MODES:
        result, _ = run_train(cfg, mode=mode)
        _, split, normalizer = load_dataset(cfg)
        cases = eval_cases_from_splits(split, normalizer, proto, stage="test")
        report = evaluate(result.model, cases, proto, with_gaps=False)
        row = {"mode": mode, "hr10": report.hr[10], "ndcg10": report.ndcg[10]}
        rows.append(row)
        if mode == "tips":
            base = row
    for row in rows:
        row["hr10_rel_delta_pct"] = (
            0.0 if row is base else round((row["hr10"] - base["hr10"]) / max(base["hr10"], 1e-12) * 100.0, 2)
        )
        row["ndcg10_rel_delta_pct"] = (
            0.0 if row is base else round((row["ndcg10"] - base["ndcg10"]) / max(base["ndcg10"], 1e-12) * 100.0, 2)
        )
    payload = {"rows": rows, **artifact_stamp(cfg)}
    out = Path(cfg.out_dir)
    write_json(out / "ablation.json", payload)
    lines = ["mode,hr10,ndcg10,hr10_rel_delta_pct,ndcg10_rel_delta_pct"]
    for r in rows:
        lines.append(f"{r['mode']},{r['hr10']!r},{r['ndcg10']!r},{r['hr10_rel_delta_pct']},{r['ndcg10_rel_delta_pct']}")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    return payload


def run_analyze(cfg: RunConfig, prefix: str | Path | None = None, n_users: int = 100) -> dict:
    """Per-user propensity gap (positive minus mean negative) for the
    time-aware estimator vs the static popularity estimate."""
    if not mode_uses_exposure(cfg.mode):
        raise ValueError(f"mode {cfg.mode!r} has no exposure estimator to analyze")
    _, split, normalizer = load_dataset(cfg)
    try:
        model = load_checkpoint(cfg, prefix)
        trained = True
    except FileNotFoundError:
        log.warning("analyze: no checkpoint found, analyzing an untrained model")
        model = TipsModel(split.n_items, model_config(cfg), cfg.seed)
        trained = False

    proto = protocol(cfg)
    cases = eval_cases_from_splits(split, normalizer, proto, stage="test")
    rng = np.random.default_rng([cfg.protocol_seed, 0xA7])
    if len(cases) > n_users:
        idx = rng.choice(len(cases), size=n_users, replace=False)
        cases = [cases[i] for i in sorted(idx)]

    static = StaticPropensity(PopularityIndex.from_splits(split, split.n_items), cfg.smoothing_alpha)
    model_gaps = model_propensity_gaps(model, cases)
    base_gaps = static_propensity_gaps(static, cases)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "propensity_gap_model.csv").write_text(histogram_csv(model_gaps))
    (out / "propensity_gap_static.csv").write_text(histogram_csv(base_gaps))
    summary = {
        "n_users": len(cases),
        "trained_checkpoint": trained,
        "model_gap_mean": float(model_gaps.mean()),
        "static_gap_mean": float(base_gaps.mean()),
        "users_model_gap_larger": int(np.sum(model_gaps > base_gaps)),
        **artifact_stamp(cfg),
    }
    write_json(out / "analyze.json", summary)
    return summary
