"""Interaction-log ingestion: parsing, per-user sequences, popularity index,
leave-one-out splits and time-gap normalization."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SECONDS_PER_MONTH = 30.4375 * 86400.0


class ParseError(ValueError):
    """Malformed input row; message carries the 1-based line number."""

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class ConfigError(ValueError):
    pass


class DataCorruptionError(ValueError):
    pass


@dataclass(frozen=True)
class LogFormat:
    """Delimited-text layout: delimiter plus column order.

    ``columns`` lists names in file order; must contain user, item and
    timestamp. A rating column, if present, is parsed and ignored (every
    row counts as one click).
    """

    delimiter: str = "\t"
    columns: tuple[str, ...] = ("user", "item", "timestamp")

    def __post_init__(self):
        required = {"user", "item", "timestamp"}
        unknown = set(self.columns) - required - {"rating"}
        if unknown:
            raise ConfigError(f"unknown columns: {sorted(unknown)}")
        if not required.issubset(self.columns):
            raise ConfigError(f"columns must include {sorted(required)}, got {self.columns}")

    @classmethod
    def sniff(cls, path: str | Path, columns: tuple[str, ...] | None = None) -> "LogFormat":
        """Guess the delimiter from the first non-empty line."""
        with open(path) as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                for cand in ("::", "\t", ","):
                    if cand in line:
                        n = len(line.split(cand))
                        cols = columns or (
                            ("user", "item", "rating", "timestamp") if n == 4 else ("user", "item", "timestamp")
                        )
                        return cls(delimiter=cand, columns=cols)
                break
        return cls(columns=columns or ("user", "item", "timestamp"))


@dataclass(frozen=True)
class Interaction:
    user: int
    item: int
    timestamp: float


@dataclass
class InteractionLog:
    """Per-user chronological sequences over contiguous 0-based vocabularies."""

    n_users: int
    n_items: int
    user_labels: list[str]
    item_labels: list[str]
    user_items: list[np.ndarray]   # per user, item indices sorted by time
    user_times: list[np.ndarray]   # matching timestamps, nondecreasing
    duplicates_dropped: int = 0

    @property
    def n_interactions(self) -> int:
        return int(sum(len(a) for a in self.user_items))

    def time_span(self) -> tuple[float, float]:
        if self.n_interactions == 0:
            return (0.0, 0.0)
        lo = min(float(t[0]) for t in self.user_times if len(t))
        hi = max(float(t[-1]) for t in self.user_times if len(t))
        return lo, hi

    def to_records(self) -> list[tuple[str, str, float]]:
        """Canonical (user label, item label, timestamp) rows, user-major."""
        out = []
        for u in range(self.n_users):
            for v, t in zip(self.user_items[u], self.user_times[u]):
                out.append((self.user_labels[u], self.item_labels[int(v)], float(t)))
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, InteractionLog):
            return NotImplemented
        return (
            self.n_users == other.n_users
            and self.n_items == other.n_items
            and self.to_records() == other.to_records()
        )


def load_log(path: str | Path, fmt: LogFormat | None = None, item_vocab: str | Path | None = None) -> InteractionLog:
    """Parse a delimited interaction file into an :class:`InteractionLog`.

    Rows are sorted per user by timestamp with a stable tie-break on the
    original line order; exact (user, item, timestamp) duplicates are
    dropped with a warning. Vocabularies are assigned by first appearance,
    unless ``item_vocab`` names a file of item labels (one per line) that
    preassigns the full catalog, keeping never-interacted items rankable.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such interaction log: {path}")
    if fmt is None:
        fmt = LogFormat.sniff(path)

    col_of = {name: i for i, name in enumerate(fmt.columns)}
    n_cols = len(fmt.columns)
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    if item_vocab is not None:
        with open(item_vocab) as fh:
            for label in fh:
                label = label.rstrip("\n")
                if label:
                    item_index.setdefault(label, len(item_index))
    per_user: list[list[tuple[float, int, int]]] = []  # (time, line_no, item)

    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(fmt.delimiter)
            if len(parts) != n_cols:
                raise ParseError(line_no, f"expected {n_cols} fields separated by {fmt.delimiter!r}, got {len(parts)}")
            try:
                ts = float(parts[col_of["timestamp"]])
            except ValueError:
                raise ParseError(line_no, f"timestamp not numeric: {parts[col_of['timestamp']]!r}") from None
            if not math.isfinite(ts) or ts < 0:
                raise ParseError(line_no, f"timestamp must be finite and nonnegative, got {ts}")
            u_label = parts[col_of["user"]]
            v_label = parts[col_of["item"]]
            if not u_label or not v_label:
                raise ParseError(line_no, "empty user or item field")
            u = user_index.setdefault(u_label, len(user_index))
            if u == len(per_user):
                per_user.append([])
            v = item_index.setdefault(v_label, len(item_index))
            per_user[u].append((ts, line_no, v))

    dropped = 0
    user_items: list[np.ndarray] = []
    user_times: list[np.ndarray] = []
    for rows in per_user:
        rows.sort(key=lambda r: (r[0], r[1]))
        items, times, seen = [], [], set()
        for ts, _line, v in rows:
            key = (v, ts)
            if key in seen:
                dropped += 1
                continue
            seen.add(key)
            items.append(v)
            times.append(ts)
        user_items.append(np.asarray(items, dtype=np.int64))
        user_times.append(np.asarray(times, dtype=np.float64))
    if dropped:
        log.warning("dropped %d duplicate (user, item, timestamp) rows", dropped)

    return InteractionLog(
        n_users=len(user_index),
        n_items=len(item_index),
        user_labels=list(user_index),
        item_labels=list(item_index),
        user_items=user_items,
        user_times=user_times,
        duplicates_dropped=dropped,
    )


def write_log(logdata: InteractionLog, path: str | Path, fmt: LogFormat | None = None) -> None:
    """Write a log back to delimited text (canonical user-major order)."""
    fmt = fmt or LogFormat()
    order = [fmt.columns.index(c) for c in ("user", "item", "timestamp")]
    with open(path, "w") as fh:
        for u_label, v_label, ts in logdata.to_records():
            t_str = str(int(ts)) if float(ts).is_integer() else repr(float(ts))
            fields = [""] * len(fmt.columns)
            fields[order[0]], fields[order[1]], fields[order[2]] = u_label, v_label, t_str
            if "rating" in fmt.columns:
                fields[fmt.columns.index("rating")] = "1"
            fh.write(fmt.delimiter.join(fields) + "\n")


def dataset_stats(logdata: InteractionLog) -> dict:
    """Summary matching the usual dataset-table columns."""
    lo, hi = logdata.time_span()
    return {
        "n_users": logdata.n_users,
        "n_items": logdata.n_items,
        "n_interactions": logdata.n_interactions,
        "time_span_months": round((hi - lo) / SECONDS_PER_MONTH, 1),
        "t_min": lo,
        "t_max": hi,
        "duplicates_dropped": logdata.duplicates_dropped,
    }


# ---------------------------------------------------------------------------
# popularity


class PopularityIndex:
    """Windowed occurrence counts over the training interactions only."""

    def __init__(self, train_items: list[np.ndarray], train_times: list[np.ndarray], n_items: int):
        self.n_items = n_items
        events_t = np.concatenate([t for t in train_times]) if train_times else np.empty(0)
        events_v = np.concatenate([v for v in train_items]) if train_items else np.empty(0, dtype=np.int64)
        order = np.argsort(events_t, kind="stable")
        self._times = events_t[order]
        self._items = events_v[order].astype(np.int64)
        self._item_times = [np.sort(self._times[self._items == v]) for v in range(n_items)]

    @classmethod
    def from_splits(cls, split: "SplitSpec", n_items: int) -> "PopularityIndex":
        return cls([u.train_items for u in split.users], [u.train_times for u in split.users], n_items)

    @property
    def span(self) -> tuple[float, float]:
        if len(self._times) == 0:
            return (0.0, 0.0)
        return float(self._times[0]), float(self._times[-1])

    def count(self, item: int, t: float, tau: float) -> int:
        """Occurrences of ``item`` in the window [t - tau, t]."""
        if tau <= 0:
            raise ConfigError(f"window tau must be positive, got {tau}")
        if not 0 <= item < self.n_items:
            return 0
        times = self._item_times[item]
        lo = np.searchsorted(times, t - tau, side="left")
        hi = np.searchsorted(times, t, side="right")
        return int(hi - lo)

    def counts_in_window(self, t: float, tau: float) -> np.ndarray:
        if tau <= 0:
            raise ConfigError(f"window tau must be positive, got {tau}")
        lo = np.searchsorted(self._times, t - tau, side="left")
        hi = np.searchsorted(self._times, t, side="right")
        return np.bincount(self._items[lo:hi], minlength=self.n_items)

    def global_counts(self) -> np.ndarray:
        return np.bincount(self._items, minlength=self.n_items)

    @staticmethod
    def rank_items(counts: np.ndarray, k: int) -> np.ndarray:
        """Top-k item ids by count (desc), zero-count items excluded,
        boundary ties broken by ascending item index."""
        nz = np.flatnonzero(counts > 0)
        if nz.size == 0 or k <= 0:
            return np.empty(0, dtype=np.int64)
        order = np.lexsort((nz, -counts[nz]))
        return nz[order][:k]

    def topk(self, t: float, k: int, tau: float) -> np.ndarray:
        return self.rank_items(self.counts_in_window(t, tau), k)

    def global_topk(self, k: int) -> np.ndarray:
        return self.rank_items(self.global_counts(), k)

    def topk_sweep(self, times: np.ndarray, k: int, tau: float) -> list[np.ndarray]:
        """Ranked top-k lists for many query times via one sliding window.

        ``times`` need not be sorted; results are returned in input order.
        Each list is ranked with the same tie rule as :meth:`topk` and has
        length k + 1 so callers can drop one excluded item.
        """
        if tau <= 0:
            raise ConfigError(f"window tau must be positive, got {tau}")
        order = np.argsort(times, kind="stable")
        counts = np.zeros(self.n_items, dtype=np.int64)
        lo = hi = 0
        out: list[np.ndarray] = [None] * len(times)  # type: ignore[list-item]
        for qi in order:
            t = times[qi]
            new_hi = np.searchsorted(self._times, t, side="right")
            if new_hi > hi:
                np.add.at(counts, self._items[hi:new_hi], 1)
                hi = new_hi
            new_lo = np.searchsorted(self._times, t - tau, side="left")
            if new_lo > lo:
                np.subtract.at(counts, self._items[lo:new_lo], 1)
                lo = new_lo
            out[qi] = self.rank_items(counts, k + 1)
        return out


# ---------------------------------------------------------------------------
# splits


@dataclass
class UserSplit:
    user: int
    train_items: np.ndarray
    train_times: np.ndarray
    val_item: int
    val_time: float
    test_item: int
    test_time: float


@dataclass
class SplitSpec:
    """Leave-one-out split: last item test, second-to-last validation,
    remainder train truncated to the most recent ``max_len`` items."""

    users: list[UserSplit]
    max_len: int
    dropped_users: int = 0
    n_items: int = 0


def make_splits(logdata: InteractionLog, max_len: int) -> SplitSpec:
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    users: list[UserSplit] = []
    dropped = 0
    for u in range(logdata.n_users):
        items, times = logdata.user_items[u], logdata.user_times[u]
        if len(items) < 3:
            dropped += 1
            continue
        users.append(
            UserSplit(
                user=u,
                train_items=items[:-2][-max_len:].copy(),
                train_times=times[:-2][-max_len:].copy(),
                val_item=int(items[-2]),
                val_time=float(times[-2]),
                test_item=int(items[-1]),
                test_time=float(times[-1]),
            )
        )
    if dropped:
        log.info("make_splits: dropped %d users with < 3 interactions", dropped)
    return SplitSpec(users=users, max_len=max_len, dropped_users=dropped, n_items=logdata.n_items)


def interacted_items(split: UserSplit) -> set[int]:
    return set(int(v) for v in split.train_items) | {split.val_item, split.test_item}


# ---------------------------------------------------------------------------
# time gaps


def raw_gaps(times: np.ndarray) -> np.ndarray:
    """Consecutive gaps in seconds; the first position is defined as 0."""
    times = np.asarray(times, dtype=np.float64)
    if len(times) == 0:
        return np.empty(0)
    gaps = np.empty(len(times))
    gaps[0] = 0.0
    gaps[1:] = np.diff(times)
    if np.any(gaps < 0):
        raise DataCorruptionError("negative inter-interaction gap; sequence not sorted")
    return gaps


@dataclass
class GapNormalizer:
    """log1p + train-set min-max scaling of inter-interaction gaps.

    Test-time gaps beyond the training range map above 1 (no clipping);
    downstream consumers tolerate that slack.
    """

    lo: float = 0.0
    hi: float = 0.0

    @classmethod
    def fit(cls, gap_seconds: np.ndarray) -> "GapNormalizer":
        g = np.log1p(np.asarray(gap_seconds, dtype=np.float64))
        if g.size == 0:
            return cls(0.0, 0.0)
        return cls(float(g.min()), float(g.max()))

    @classmethod
    def fit_from_splits(cls, split: SplitSpec) -> "GapNormalizer":
        all_gaps = [raw_gaps(u.train_times) for u in split.users]
        return cls.fit(np.concatenate(all_gaps) if all_gaps else np.empty(0))

    def transform(self, gap_seconds) -> np.ndarray:
        g = np.asarray(gap_seconds, dtype=np.float64)
        if np.any(g < 0):
            raise DataCorruptionError("negative gap")
        g = np.log1p(g)
        if self.hi <= self.lo:
            return np.zeros_like(g)
        return (g - self.lo) / (self.hi - self.lo)

    def normalize_gaps(self, times: np.ndarray) -> np.ndarray:
        """Normalized gap sequence for sorted timestamps (first gap 0)."""
        return self.transform(raw_gaps(times))
