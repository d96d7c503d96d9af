"""Flat key=value run configuration: schema-validated, diffable, hashable."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .data import ConfigError, LogFormat
from .model import MODES
from .simulator import POLICIES

_DELIMITERS = {"auto": None, "tab": "\t", "comma": ",", "double_colon": "::"}


@dataclass
class RunConfig:
    # data
    dataset_path: str = ""
    item_vocab: str = ""
    delimiter: str = "auto"
    columns: str = "user,item,timestamp"
    # model dims
    dim: int = 64
    heads: int = 2
    max_len: int = 50
    backbone: str = "attention"
    # counterfactual construction
    top_k: int = 10
    window_days: float = 30.0
    delta_bound: float = 1e-4
    negative_ratio: int = 1
    # objective
    mode: str = "tips"
    mu: float = 0.5
    gamma: float = 0.3
    epsilon: float = 0.05
    lr: float = 5e-5
    batch_size: int = 16
    epochs: int = 10
    optimizer: str = "sgd"
    targets_per_user: int = 0
    smoothing_alpha: float = 1.0
    # evaluation protocol
    cutoffs: str = "5,10"
    eval_negatives: int = 99
    protocol_seed: int = 2024
    # simulator world
    sim_users: int = 100
    sim_items: int = 50
    sim_latent_dim: int = 8
    sim_policy: str = "popularity"
    sim_skew: float = 2.0
    sim_horizon: int = 50
    sim_slate: int = 3
    sim_click_scale: float = 6.0
    sim_click_bias: float = 0.0
    sim_step_seconds: float = 86400.0
    sim_recency_halflife: float = 5.0
    # global
    seed: int = 7
    out_dir: str = "runs/out"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.delimiter not in _DELIMITERS:
            raise ConfigError(f"delimiter must be one of {sorted(_DELIMITERS)}, got {self.delimiter!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.sim_policy not in POLICIES:
            raise ConfigError(f"sim_policy must be one of {POLICIES}, got {self.sim_policy!r}")
        if self.backbone not in ("attention", "mean", "generative"):
            raise ConfigError(f"backbone must be attention, mean or generative, got {self.backbone!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim ({self.dim}) must be positive and divisible by heads ({self.heads})")
        if not self.mu > 0:
            raise ConfigError(f"mu must be positive, got {self.mu}")
        if not 0 < self.epsilon < 0.5:
            raise ConfigError(f"epsilon must be in (0, 0.5), got {self.epsilon}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be nonnegative, got {self.gamma}")
        for name in ("top_k", "negative_ratio", "max_len", "batch_size", "epochs", "eval_negatives"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.window_days <= 0 or self.delta_bound <= 0:
            raise ConfigError("window_days and delta_bound must be positive")
        self.parsed_cutoffs()
        self.parsed_columns()

    def parsed_cutoffs(self) -> tuple[int, ...]:
        try:
            ks = tuple(int(x) for x in self.cutoffs.split(","))
        except ValueError:
            raise ConfigError(f"cutoffs must be comma-separated ints, got {self.cutoffs!r}") from None
        if not ks or any(k < 1 for k in ks):
            raise ConfigError(f"cutoffs must be positive, got {self.cutoffs!r}")
        return ks

    def parsed_columns(self) -> tuple[str, ...]:
        cols = tuple(c.strip() for c in self.columns.split(","))
        LogFormat(delimiter="\t", columns=cols)  # validates names
        return cols

    def log_format(self, path: str | Path | None = None) -> LogFormat:
        delim = _DELIMITERS[self.delimiter]
        cols = self.parsed_columns()
        if delim is None:
            if path is None:
                raise ConfigError("delimiter 'auto' needs a dataset path to sniff")
            return LogFormat.sniff(path, columns=cols)
        return LogFormat(delimiter=delim, columns=cols)

    # -- serialization -------------------------------------------------------

    def to_text(self) -> str:
        """Canonical key = value dump (definition order, all keys)."""
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def train_hash(self) -> str:
        """Hash of the fields a checkpoint depends on (eval knobs excluded)."""
        keep = (
            "dataset_path item_vocab delimiter columns dim heads max_len backbone "
            "top_k window_days delta_bound negative_ratio mode mu gamma epsilon lr "
            "batch_size epochs optimizer targets_per_user smoothing_alpha seed"
        ).split()
        text = "\n".join(f"{k} = {getattr(self, k)}" for k in keep)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values: dict[str, str] = {}
        for line_no, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"config line {line_no}: expected 'key = value', got {line!r}")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key in values:
                raise ConfigError(f"config line {line_no}: duplicate key {key!r}")
            values[key] = raw

        types = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(types)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, raw in values.items():
            ftype = types[key]
            try:
                if ftype in ("int", int):
                    kwargs[key] = int(raw)
                elif ftype in ("float", float):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = raw
            except ValueError:
                raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {ftype}") from None
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"no such config file: {path}")
        return cls.from_text(path.read_text())
