"""Minimal reverse-mode autodiff over dense 2-D float64 arrays.

Everything in this package differentiates through the small set of forward
operations defined here: embedding lookup, affine maps, softmax, sigmoid,
scaled dot-product attention, pooling and a few pointwise helpers. Each op
records a closure that accumulates exact gradients into its parents, so
``backward(loss)`` yields analytic gradients that can be checked against
central finite differences (see :func:`grad_check`).

Design constraints:
  * all values are 2-D ``float64`` matrices (row vectors are 1 x n);
  * gradient accumulation is additive; call ``ParamRegistry.zero_grads()``
    at the start of every batch;
  * everything is deterministic given its inputs, so finite-difference
    oracles are stable.
"""

from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DimensionError",
    "NumericError",
    "DegenerateVectorError",
    "Tensor",
    "ParamRegistry",
    "GradCheckReport",
    "no_grad",
    "grad_enabled",
    "constant",
    "backward",
    "add",
    "add_n",
    "add_row",
    "sub",
    "mul",
    "mul_col",
    "div",
    "scale",
    "shift",
    "neg",
    "matmul",
    "transpose",
    "concat_cols",
    "concat_rows",
    "take_rows",
    "attention_weights",
    "rowsum",
    "sum_all",
    "mean_all",
    "softmax_rows",
    "sigmoid",
    "log_sigmoid",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "lookup",
    "affine",
    "scaled_dot_attention",
    "cosine_sim",
    "stable_sigmoid",
    "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


class DegenerateVectorError(ValueError):
    """A vector op received an input with zero norm."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build ops without recording the tape (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected at most 2-D data, got shape {arr.shape}")
    return arr


class Tensor:
    """A node in the reverse-mode graph holding a rows x cols float64 matrix."""

    __slots__ = ("value", "grad", "name", "trainable", "needs_grad", "_parents", "_backward")

    def __init__(self, value, *, parents=(), backward=None, name=None, needs_grad=None):
        self.value = _as_matrix(value)
        self.name = name
        self.trainable = False
        self._parents = parents
        self._backward = backward
        if needs_grad is None:
            needs_grad = _GRAD_ENABLED and any(p.needs_grad for p in parents)
        self.needs_grad = needs_grad and _GRAD_ENABLED
        self.grad = None

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def detach(self) -> np.ndarray:
        """Value as a plain array, cut off from the graph."""
        return self.value.copy()

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


def constant(value) -> Tensor:
    """Leaf tensor that never receives gradient (input data)."""
    t = Tensor(value, needs_grad=False)
    return t


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad over the needs_grad subgraph."""
    if loss.value.size != 1:
        raise DimensionError(f"backward() expects a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.value[0, 0]):
        raise NumericError(f"loss is non-finite: {loss.value[0, 0]}")
    if not loss.needs_grad:
        return

    # Iterative topological order (graphs can be deep for long batches).
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.needs_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.needs_grad and id(p) not in seen:
                stack.append((p, False))

    loss.ensure_grad()[...] += 1.0
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _op(value, parents, backward_fn, name=None) -> Tensor:
    out = Tensor(value, parents=parents, backward=backward_fn if _GRAD_ENABLED else None, name=name)
    return out


def _require_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")

    def bw(g):
        if a.needs_grad:
            a.ensure_grad()[...] += g
        if b.needs_grad:
            b.ensure_grad()[...] += g

    return _op(a.value + b.value, (a, b), bw)


def add_n(terms: list[Tensor]) -> Tensor:
    """Sum of same-shaped tensors (flat, avoids deep add chains)."""
    if not terms:
        raise DimensionError("add_n: empty term list")
    for t in terms[1:]:
        _require_same_shape(terms[0], t, "add_n")
    total = terms[0].value.copy()
    for t in terms[1:]:
        total += t.value

    def bw(g):
        for t in terms:
            if t.needs_grad:
                t.ensure_grad()[...] += g

    return _op(total, tuple(terms), bw)


def add_row(x: Tensor, row: Tensor) -> Tensor:
    """x + row broadcast over rows; row is 1 x cols (bias add)."""
    if row.rows != 1 or row.cols != x.cols:
        raise DimensionError(f"add_row: x {x.shape} vs row {row.shape}")

    def bw(g):
        if x.needs_grad:
            x.ensure_grad()[...] += g
        if row.needs_grad:
            row.ensure_grad()[...] += g.sum(axis=0, keepdims=True)

    return _op(x.value + row.value, (x, row), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")

    def bw(g):
        if a.needs_grad:
            a.ensure_grad()[...] += g
        if b.needs_grad:
            b.ensure_grad()[...] -= g

    return _op(a.value - b.value, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")

    def bw(g):
        if a.needs_grad:
            a.ensure_grad()[...] += g * b.value
        if b.needs_grad:
            b.ensure_grad()[...] += g * a.value

    return _op(a.value * b.value, (a, b), bw)


def mul_col(x: Tensor, col: Tensor) -> Tensor:
    """Row-wise scaling: x * col with col of shape rows x 1."""
    if col.cols != 1 or col.rows != x.rows:
        raise DimensionError(f"mul_col: x {x.shape} vs col {col.shape}")

    def bw(g):
        if x.needs_grad:
            x.ensure_grad()[...] += g * col.value
        if col.needs_grad:
            col.ensure_grad()[...] += (g * x.value).sum(axis=1, keepdims=True)

    return _op(x.value * col.value, (x, col), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "div")

    def bw(g):
        if a.needs_grad:
            a.ensure_grad()[...] += g / b.value
        if b.needs_grad:
            b.ensure_grad()[...] -= g * a.value / (b.value ** 2)

    return _op(a.value / b.value, (a, b), bw)


def scale(x: Tensor, k: float) -> Tensor:
    k = float(k)

    def bw(g):
        if x.needs_grad:
            x.ensure_grad()[...] += k * g

    return _op(x.value * k, (x,), bw)


def shift(x: Tensor, k: float) -> Tensor:
    k = float(k)

    def bw(g):
        if x.needs_grad:
            x.ensure_grad()[...] += g

    return _op(x.value + k, (x,), bw)


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: inner dims of {a.shape} and {b.shape} disagree")

    def bw(g):
        if a.needs_grad:
            a.ensure_grad()[...] += g @ b.value.T
        if b.needs_grad:
            b.ensure_grad()[...] += a.value.T @ g

    return _op(a.value @ b.value, (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    def bw(g):
        if x.needs_grad:
            x.ensure_grad()[...] += g.T

    return _op(x.value.T, (x,), bw)


def concat_rows(parts: list[Tensor]) -> Tensor:
    cols = parts[0].cols
    for p in parts[1:]:
        if p.cols != cols:
            raise DimensionError(f"concat_rows: column counts {cols} and {p.cols} differ")
    heights = [p.rows for p in parts]
    offsets = np.cumsum([0] + heights)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.needs_grad:
                p.ensure_grad()[...] += g[lo:hi, :]

    return _op(np.concatenate([p.value for p in parts], axis=0), tuple(parts), bw)


def concat_cols(parts: list[Tensor]) -> Tensor:
    rows = parts[0].rows
    for p in parts[1:]:
        if p.rows != rows:
            raise DimensionError(f"concat_cols: row counts {rows} and {p.rows} differ")
    widths = [p.cols for p in parts]
    offsets = np.cumsum([0] + widths)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.needs_grad:
                p.ensure_grad()[...] += g[:, lo:hi]

    return _op(np.concatenate([p.value for p in parts], axis=1), tuple(parts), bw)


def rowsum(x: Tensor) -> Tensor:
    """Sum each row, giving rows x 1."""

    def bw(g):
        if x.needs_grad:
            x.ensure_grad()[...] += g  # (rows,1) broadcasts over columns

    return _op(x.value.sum(axis=1, keepdims=True), (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        if x.needs_grad:
            x.ensure_grad()[...] += g[0, 0]

    return _op([[x.value.sum()]], (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    n = x.value.size

    def bw(g):
        if x.needs_grad:
            x.ensure_grad()[...] += g[0, 0] / n

    return _op([[x.value.mean()]], (x,), bw)


# ---------------------------------------------------------------------------
# nonlinearities


def softmax_rows(x: Tensor) -> Tensor:
    # Per-row max subtraction for overflow safety.
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        if x.needs_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            x.ensure_grad()[...] += (g - dot) * y

    return _op(y, (x,), bw)


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic on plain arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = stable_sigmoid(x.value)

    def bw(g):
        if x.needs_grad:
            x.ensure_grad()[...] += g * y * (1.0 - y)

    return _op(y, (x,), bw)


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) computed without underflow; use for BCE/BPR terms."""
    y = -np.logaddexp(0.0, -x.value)

    def bw(g):
        if x.needs_grad:
            x.ensure_grad()[...] += g * stable_sigmoid(-x.value)

    return _op(y, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)

    def bw(g):
        if x.needs_grad:
            x.ensure_grad()[...] += g * (1.0 - y * y)

    return _op(y, (x,), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.value)

    def bw(g):
        if x.needs_grad:
            x.ensure_grad()[...] += g * y

    return _op(y, (x,), bw)


def log(x: Tensor) -> Tensor:
    if np.any(x.value <= 0):
        raise NumericError("log: non-positive input")

    def bw(g):
        if x.needs_grad:
            x.ensure_grad()[...] += g / x.value

    return _op(np.log(x.value), (x,), bw)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.value < 0):
        raise NumericError("sqrt: negative input")
    y = np.sqrt(x.value)

    def bw(g):
        if x.needs_grad:
            x.ensure_grad()[...] += g * 0.5 / y

    return _op(y, (x,), bw)


# ---------------------------------------------------------------------------
# structured ops


def lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of an embedding table; gradients scatter-add back."""
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    n = table.rows
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"lookup: index out of range for table with {n} rows")

    def bw(g):
        if table.needs_grad:
            np.add.at(table.ensure_grad(), idx, g)

    return _op(table.value[idx], (table,), bw)


take_rows = lookup  # row gather works on any tensor, not just embedding tables


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast over rows."""
    if x.cols != w.rows:
        raise DimensionError(f"affine: x {x.shape} does not match w {w.shape}")
    if b.rows != 1 or b.cols != w.cols:
        raise DimensionError(f"affine: bias {b.shape} does not match w {w.shape}")
    return add_row(matmul(x, w), b)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q kT / sqrt(width)) v, rows of q attend over rows of k/v."""
    if k.rows == 0:
        raise DimensionError("scaled_dot_attention: empty key set")
    if q.cols != k.cols:
        raise DimensionError(f"scaled_dot_attention: q {q.shape} vs k {k.shape}")
    if k.rows != v.rows:
        raise DimensionError(f"scaled_dot_attention: k {k.shape} vs v {v.shape}")
    logits = scale(matmul(q, transpose(k)), 1.0 / np.sqrt(q.cols))
    return matmul(softmax_rows(logits), v)


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """The softmax weight rows of scaled dot-product attention."""
    if k.rows == 0:
        raise DimensionError("attention_weights: empty key set")
    if q.cols != k.cols:
        raise DimensionError(f"attention_weights: q {q.shape} vs k {k.shape}")
    return softmax_rows(scale(matmul(q, transpose(k)), 1.0 / np.sqrt(q.cols)))


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two row vectors, as a 1x1 node."""
    if a.rows != 1 or b.rows != 1 or a.cols != b.cols:
        raise DimensionError(f"cosine_sim: need matching row vectors, got {a.shape}, {b.shape}")
    if np.linalg.norm(a.value) == 0.0 or np.linalg.norm(b.value) == 0.0:
        raise DegenerateVectorError("cosine_sim: zero-norm input")
    dot = sum_all(mul(a, b))
    na = sqrt(sum_all(mul(a, a)))
    nb = sqrt(sum_all(mul(b, b)))
    return div(dot, mul(na, nb))


# ---------------------------------------------------------------------------
# parameters


class ParamRegistry:
    """Named trainable matrices plus their gradient slots."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value, *, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(value, needs_grad=trainable, name=name)
        t.trainable = trainable
        t.ensure_grad()
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def grad_norm(self) -> float:
        total = 0.0
        for t in self._params.values():
            total += float((t.grad ** 2).sum())
        return float(np.sqrt(total))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, v in state.items():
            tgt = self._params[k]
            if tgt.value.shape != v.shape:
                raise DimensionError(f"{k}: shape {v.shape} does not match {tgt.value.shape}")
            tgt.value[...] = v

    # -- checkpoint: flat little-endian float64 blob + JSON manifest ---------

    def save(self, prefix: str | Path, extra: dict | None = None) -> None:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        entries = []
        offset = 0
        blobs = []
        for name, t in self._params.items():
            raw = np.ascontiguousarray(t.value, dtype="<f8").tobytes()
            entries.append(
                {
                    "name": name,
                    "shape": list(t.value.shape),
                    "dtype": "<f8",
                    "offset": offset,
                    "nbytes": len(raw),
                    "trainable": t.trainable,
                }
            )
            blobs.append(raw)
            offset += len(raw)
        manifest = {"params": entries, "extra": extra or {}}
        with open(prefix.with_suffix(".manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        with open(prefix.with_suffix(".bin"), "wb") as fh:
            fh.write(b"".join(blobs))

    def load(self, prefix: str | Path) -> dict:
        """Bit-exact restore from :meth:`save`; returns the manifest extras."""
        prefix = Path(prefix)
        with open(prefix.with_suffix(".manifest.json")) as fh:
            manifest = json.load(fh)
        raw = Path(prefix.with_suffix(".bin")).read_bytes()
        state = {}
        for e in manifest["params"]:
            buf = raw[e["offset"] : e["offset"] + e["nbytes"]]
            state[e["name"]] = np.frombuffer(buf, dtype=e["dtype"]).reshape(e["shape"]).astype(np.float64)
        self.load_state_dict(state)
        return manifest.get("extra", {})


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Max relative gradient error per parameter, against central differences."""

    per_param: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]

    @property
    def passed(self) -> bool:
        return all(v <= self.tolerance for v in self.per_param.values())

    def __str__(self) -> str:
        lines = [f"grad check (tol {self.tolerance:g}):"]
        for name, err in sorted(self.per_param.items()):
            mark = "ok " if err <= self.tolerance else "FAIL"
            lines.append(f"  [{mark}] {name}: max rel err {err:.3e}")
        return "\n".join(lines)


def _rel_err(a: np.ndarray, n: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return float(np.max(np.abs(a - n) / denom))


def grad_check(closure, params: ParamRegistry, tolerance: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of ``closure()`` with central differences.

    ``closure`` must rebuild the loss graph from the registry's current
    values on every call and be deterministic (freeze any sampling before
    calling). Relative error uses a unit floor so near-zero gradients are
    compared absolutely.
    """
    params.zero_grads()
    loss = closure()
    if not np.isfinite(loss.value).all():
        raise NumericError("grad_check: loss is non-finite at the base point")
    backward(loss)
    analytic = {k: t.grad.copy() for k, t in params.items()}

    report = GradCheckReport(tolerance=tolerance)
    for name, t in params.items():
        numeric = np.zeros_like(t.value)
        flat = t.value.reshape(-1)
        num_flat = numeric.reshape(-1)
        if t.trainable:
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                with no_grad():
                    f_plus = closure().item()
                flat[i] = orig - step
                with no_grad():
                    f_minus = closure().item()
                flat[i] = orig
                num_flat[i] = (f_plus - f_minus) / (2.0 * step)
        report.per_param[name] = _rel_err(analytic[name], numeric)
    return report
