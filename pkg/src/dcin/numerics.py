"""Float64 tensors with a small reverse-mode autodiff engine.

Only the operations the matching model needs are provided, and binary ops
require matching shapes (the few broadcasts the model uses are explicit ops
such as :func:`add_bias` and :func:`scale_rows`).

Every op output is checked for non-finite values; a NaN or inf aborts the
forward pass with :class:`NumericError`.

Matrix products accumulate over the inner dimension in index order, so the
result is bit-identical to a naive triple loop and independent of the BLAS
build.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1
LEAKY_SLOPE = 0.01

_seq = itertools.count()


class NumericError(ArithmeticError):
    pass


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    """Dense float64 array that can take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; the functions below are the real implementations
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
        out._seq = next(_seq)
    else:
        out._parents = ()
        out._backward = None
        out._seq = -1
    return out


def _check_finite(x: Tensor, op: str):
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"non-finite input to {op}")


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Plain-array matrix product with in-order accumulation over k."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.shape[1] == 0:
        return np.zeros((a.shape[0], b.shape[1]))
    # reduction over the leading axis is sequential in numpy
    return (a.T[:, :, None] * b[:, None, :]).sum(axis=0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = mm(a.data, b.data)

    def back(g):
        return mm(g, b.data.T), mm(a.data.T, g)

    return _record(out, (a, b), back, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a length-n bias vector to every row of an m x n matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.shape != (a.shape[1],):
        raise DimensionError(f"add_bias: {a.shape} with bias {b.shape}")
    return _record(a.data + b.data[None, :], (a, b), lambda g: (g, g.sum(axis=0)), "add_bias")


def scale_rows(a: Tensor, v: Tensor) -> Tensor:
    """Multiply row i of an m x n matrix by v[i]."""
    a, v = as_tensor(a), as_tensor(v)
    if a.data.ndim != 2 or v.data.shape != (a.shape[0],):
        raise DimensionError(f"scale_rows: {a.shape} with {v.shape}")

    def back(g):
        return g * v.data[:, None], (g * a.data).sum(axis=1)

    return _record(a.data * v.data[:, None], (a, v), back, "scale_rows")


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("transpose needs a matrix")
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise DimensionError(f"concat_cols: {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    cuts = np.cumsum(widths)[:-1]
    return _record(
        np.concatenate([p.data for p in parts], axis=1),
        parts,
        lambda g: np.split(g, cuts, axis=1),
        "concat_cols",
    )


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    cols = {p.shape[1:] for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: {[p.shape for p in parts]}")
    heights = [p.shape[0] for p in parts]
    cuts = np.cumsum(heights)[:-1]
    return _record(
        np.concatenate([p.data for p in parts], axis=0),
        parts,
        lambda g: np.split(g, cuts, axis=0),
        "concat_rows",
    )


def softmax_rows(a: Tensor) -> Tensor:
    a = as_tensor(a)
    _check_finite(a, "softmax_rows")
    x = a.data if a.data.ndim == 2 else a.data.reshape(1, -1)
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = (e / e.sum(axis=1, keepdims=True)).reshape(a.shape)

    def back(g):
        g2 = g.reshape(y.shape[0] if y.ndim == 2 else 1, -1)
        y2 = y.reshape(g2.shape)
        return ((y2 * (g2 - (g2 * y2).sum(axis=1, keepdims=True))).reshape(a.shape),)

    return _record(y, (a,), back, "softmax_rows")


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    k = np.where(a.data > 0, 1.0, slope)
    return _record(a.data * k, (a,), lambda g: (g * k,), "leaky_relu")


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    k = (a.data > 0).astype(np.float64)
    return _record(a.data * k, (a,), lambda g: (g * k,), "relu")


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "tanh":
        return tanh(a)
    if kind == "leaky_relu":
        return leaky_relu(a)
    raise ValueError(f"unknown activation {kind!r}")


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _record(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.size
    return _record(np.array(a.data.sum() / n), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def take(a: Tensor, index) -> Tensor:
    """Numpy-style gather ``a[index]``; repeated indices accumulate gradient."""
    a = as_tensor(a)
    out = np.array(a.data[index], dtype=np.float64)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(out, (a,), back, "take")


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(old),), "reshape")


def segment_sum(a: Tensor, lengths: Sequence[int]) -> Tensor:
    """Sum consecutive row groups of the given lengths: (sum(lengths) x n) -> (len x n)."""
    a = as_tensor(a)
    lengths = np.asarray(lengths, dtype=np.int64)
    if a.data.ndim != 2 or lengths.sum() != a.shape[0] or np.any(lengths < 1):
        raise DimensionError(f"segment_sum: {a.shape} with lengths summing to {lengths.sum()}")
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    out = np.stack([a.data[s:s + n].sum(axis=0) for s, n in zip(starts, lengths)])
    return _record(out, (a,), lambda g: (np.repeat(g, lengths, axis=0),), "segment_sum")


def segment_mean(a: Tensor, lengths: Sequence[int]) -> Tensor:
    lengths = np.asarray(lengths, dtype=np.int64)
    summed = segment_sum(a, lengths)
    # divide by exact lengths, row by row
    return scale_rows(summed, Tensor(1.0 / lengths.astype(np.float64)))


def dot_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise inner products of two m x n matrices, giving a length-m vector."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "dot_rows")
    out = (a.data * b.data).sum(axis=1)
    return _record(out, (a, b), lambda g: (g[:, None] * b.data, g[:, None] * a.data), "dot_rows")


class Tape:
    """Recorded operations reachable from one output, in recording order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> Tape:
        seen: set[int] = set()
        nodes = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def replay(self, out: Tensor, seed: np.ndarray) -> dict[int, tuple[Tensor, np.ndarray]]:
        """Propagate ``seed`` from ``out`` back over the tape, once per op.

        Returns leaf gradients keyed by tensor identity.
        """
        grads: dict[int, np.ndarray] = {id(out): seed}
        leaves: dict[int, Tensor] = {}
        if out._backward is None and out.requires_grad:
            leaves[id(out)] = out
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else np.asarray(pg, dtype=np.float64)
                if parent._backward is None:
                    leaves[key] = parent
        return {k: (t, grads[k]) for k, t in leaves.items()}


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Gradients are written fresh, not accumulated. Tensors listed in ``wrt``
    that are not on the path get a zero gradient; when ``wrt`` is given the
    gradients are also returned in that order.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    leaves = tape.replay(loss, np.ones_like(loss.data))
    for t, g in leaves.values():
        t.grad = g.reshape(t.shape)
    if wrt is None:
        return None
    out = []
    for t in wrt:
        if id(t) not in leaves:
            t.grad = np.zeros_like(t.data)
        out.append(t.grad)
    return out


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x.requires_grad = True
    (analytic,) = backward(f(x), [x])
    analytic = analytic.copy()
    base = x.data.copy()
    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        flat[i] = base.reshape(-1)[i] + h
        fp = f(x).item()
        flat[i] = base.reshape(-1)[i] - h
        fm = f(x).item()
        flat[i] = base.reshape(-1)[i]
        numeric[i] = (fp - fm) / (2 * h)
    a = analytic.reshape(-1)
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a)))) if a.size else 0.0


def rng_for(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    """Independent PCG64 stream for (seed, purpose, extra...).

    The purpose string is hashed with SHA-256 so stream identity never
    depends on Python's randomized ``hash``.
    """
    tag = int.from_bytes(hashlib.sha256(purpose.encode()).digest()[:8], "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), tag, *map(int, extra)])))


def tensors_to_json(tensors: dict[str, np.ndarray | Tensor], meta: dict | None = None) -> dict:
    body = {}
    for name in sorted(tensors):
        arr = tensors[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=np.float64)
        body[name] = {"shape": list(arr.shape), "data": [float(v) for v in arr.reshape(-1)]}
    doc = {"format_version": FORMAT_VERSION, "tensors": body}
    if meta is not None:
        doc["meta"] = meta
    return doc


def tensors_from_json(doc: dict) -> tuple[dict[str, np.ndarray], dict]:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint format_version {version!r}")
    out = {}
    for name, entry in doc["tensors"].items():
        shape = tuple(entry["shape"])
        data = np.array(entry["data"], dtype=np.float64)
        if data.size != math.prod(shape):
            raise DimensionError(f"tensor {name}: {data.size} values for shape {shape}")
        out[name] = data.reshape(shape)
    return out, doc.get("meta", {})


def save_checkpoint(path, tensors: dict, meta: dict | None = None):
    # repr-based float output in json is the shortest round-trip decimal
    Path(path).write_text(json.dumps(tensors_to_json(tensors, meta), sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return tensors_from_json(json.loads(Path(path).read_text()))
