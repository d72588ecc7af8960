"""Dense float64 tensors with tape-based reverse-mode differentiation.

The graph is define-by-run: while a ``Graph`` is active (``with Graph():``),
every op appends a node in execution order, so insertion order is already a
topological order and ``backward`` just replays the tape in reverse. Ops
executed with no active graph compute forward values only, which is the
cheap path for rollouts and finite-difference probes.

Ops never mutate their inputs; every op allocates a fresh output array.
Scalars are 0-d tensors. Set ``DEBUG_CHECKS = True`` (or the
``IOTRL_DEBUG_CHECKS=1`` env var) to assert finite outputs after every op.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import threading

import numpy as np

from .errors import DomainError, ShapeError, UsageError

DEBUG_CHECKS = os.environ.get("IOTRL_DEBUG_CHECKS", "") == "1"

_NEG_INF_FILL = -1e30  # finite stand-in for -inf in masked attention logits


def _contig(arr) -> np.ndarray:
    """C-contiguous float64 view-or-copy; unlike np.ascontiguousarray this
    does not promote 0-d arrays to shape (1,)."""
    arr = np.asarray(arr, dtype=np.float64)
    return arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_gid", "_nid")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)  # copy: never alias caller memory
        self.data = _contig(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._gid = 0
        self._nid = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _out(arr: np.ndarray) -> Tensor:
    """Wrap a freshly allocated array without re-copying."""
    t = Tensor.__new__(Tensor)
    t.data = _contig(arr)
    t.requires_grad = False
    t.grad = None
    t._gid = 0
    t._nid = -1
    return t


class _Node:
    __slots__ = ("op", "inputs", "out", "bwd")

    def __init__(self, op, inputs, out, bwd):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


_uid_counter = itertools.count(1)
_tls = threading.local()


def _active() -> "Graph | None":
    return getattr(_tls, "graph", None)


class Graph:
    """Append-only tape of op records; insertion order is topological."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._uid = next(_uid_counter)
        self._prev = None

    def __enter__(self) -> "Graph":
        self._prev = _active()
        _tls.graph = self
        return self

    def __exit__(self, *exc_info) -> None:
        _tls.graph = self._prev
        self._prev = None

    def _node_of(self, t: Tensor) -> int:
        if t._gid != self._uid:
            t._gid = self._uid
            t._nid = len(self.nodes)
            self.nodes.append(_Node("leaf", (), t, None))
        return t._nid

    def _append(self, op: str, out: Tensor, inputs: tuple[Tensor, ...], bwd) -> None:
        ids = tuple(self._node_of(t) for t in inputs)
        out._gid = self._uid
        out._nid = len(self.nodes)
        self.nodes.append(_Node(op, ids, out, bwd))


def _record(op: str, out: Tensor, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    if DEBUG_CHECKS:
        assert np.all(np.isfinite(out.data)), f"non-finite output of {op}"
    g = _active()
    if g is not None:
        g._append(op, out, inputs, bwd)
    return out


def backward(graph: Graph, root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every requires_grad leaf of the tape."""
    if root._gid != graph._uid:
        raise UsageError("backward: root was not produced under this graph")
    if root.data.size != 1:
        raise UsageError(f"backward: root must be scalar, got shape {root.shape}")
    n = len(graph.nodes)
    grads: list[np.ndarray | None] = [None] * n
    owned = [False] * n
    grads[root._nid] = np.ones_like(root.data)
    owned[root._nid] = True
    for i in range(n - 1, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = graph.nodes[i]
        if node.bwd is None:  # leaf
            t = node.out
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g
            continue
        parts = node.bwd(g)
        for iid, p in zip(node.inputs, parts):
            if p is None:
                continue
            cur = grads[iid]
            if cur is None:
                grads[iid] = p
            elif owned[iid]:
                cur += p
            else:
                grads[iid] = cur + p
                owned[iid] = True
        grads[i] = None  # release


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# primitive ops


def _binary_check(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = _out(a.data @ b.data)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", out, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_check("add", a, b)
    out = _out(a.data + b.data)

    def bwd(g):
        return g, g

    return _record("add", out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_check("sub", a, b)
    out = _out(a.data - b.data)

    def bwd(g):
        return g, -g

    return _record("sub", out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_check("mul", a, b)
    out = _out(a.data * b.data)

    def bwd(g):
        return g * b.data, g * a.data

    return _record("mul", out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _out(a.data * c)

    def bwd(g):
        return (g * c,)

    return _record("scale", out, (a,), bwd)


def add_row(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d row vector to every row of an n-by-d matrix."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_row: incompatible shapes {x.shape} and {b.shape}")
    out = _out(x.data + b.data)

    def bwd(g):
        return g, g.sum(axis=0)

    return _record("add_row", out, (x, b), bwd)


def relu(a: Tensor) -> Tensor:
    out = _out(np.maximum(a.data, 0.0))

    def bwd(g):
        return (g * (a.data > 0.0),)

    return _record("relu", out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _out(y)

    def bwd(g):
        return (g * (1.0 - y * y),)

    return _record("tanh", out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = _out(y)

    def bwd(g):
        return (g * y,)

    return _record("exp", out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log: input must be strictly positive")
    out = _out(np.log(a.data))

    def bwd(g):
        return (g / a.data,)

    return _record("log", out, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    out = _out(a.data.sum())

    def bwd(g):
        return (np.full(a.data.shape, float(g)),)

    return _record("sum_all", out, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    out = _out(a.data.mean())
    inv_n = 1.0 / a.data.size

    def bwd(g):
        return (np.full(a.data.shape, float(g) * inv_n),)

    return _record("mean_all", out, (a,), bwd)


def rowsum(a: Tensor) -> Tensor:
    """Sum over the last axis, keeping it as size 1."""
    out = _out(a.data.sum(axis=-1, keepdims=True))

    def bwd(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record("rowsum", out, (a,), bwd)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _out(y)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", out, (a,), bwd)


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    out = _out(y)

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", out, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization over the last axis, then affine transform."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.shape}, {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _out(xhat * gain.data + bias.data)

    def bwd(g):
        gh = g * gain.data
        dx = inv * (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _record("layer_norm", out, (x, gain, bias), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d, got shape {a.shape}")
    out = _out(np.ascontiguousarray(a.data.T))

    def bwd(g):
        return (np.ascontiguousarray(g.T),)

    return _record("transpose", out, (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _out(a.data.reshape(shape).copy())

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _record("reshape", out, (a,), bwd)


def slice_cols(a: Tensor, j0: int, j1: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= j0 < j1 <= a.shape[1]):
        raise ShapeError(f"slice_cols: bad slice [{j0}:{j1}] of shape {a.shape}")
    out = _out(a.data[:, j0:j1].copy())

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, j0:j1] = g
        return (full,)

    return _record("slice_cols", out, (a,), bwd)


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts or any(p.data.ndim != 2 for p in parts):
        raise ShapeError("concat_cols: expects a non-empty list of 2-d tensors")
    rows = parts[0].shape[0]
    if any(p.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols: row counts differ")
    widths = [p.shape[1] for p in parts]
    out = _out(np.concatenate([p.data for p in parts], axis=1))

    def bwd(g):
        res = []
        j = 0
        for w in widths:
            res.append(g[:, j : j + w].copy())
            j += w
        return tuple(res)

    return _record("concat_cols", out, tuple(parts), bwd)


def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts or any(p.data.ndim != 2 for p in parts):
        raise ShapeError("concat_rows: expects a non-empty list of 2-d tensors")
    cols = parts[0].shape[1]
    if any(p.shape[1] != cols for p in parts):
        raise ShapeError("concat_rows: column counts differ")
    heights = [p.shape[0] for p in parts]
    out = _out(np.concatenate([p.data for p in parts], axis=0))

    def bwd(g):
        res = []
        i = 0
        for h in heights:
            res.append(g[i : i + h].copy())
            i += h
        return tuple(res)

    return _record("concat_rows", out, tuple(parts), bwd)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _binary_check("minimum", a, b)
    take_a = a.data <= b.data  # ties go to the first argument
    out = _out(np.where(take_a, a.data, b.data))

    def bwd(g):
        return g * take_a, g * ~take_a

    return _record("minimum", out, (a, b), bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    lo = float(lo)
    hi = float(hi)
    inside = (a.data > lo) & (a.data < hi)
    out = _out(np.clip(a.data, lo, hi))

    def bwd(g):
        return (g * inside,)

    return _record("clip", out, (a,), bwd)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction over a named parameter collection.

    One first/second-moment pair per parameter; a single step counter. After
    each step the parameter gradients are cleared.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 3e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise UsageError(f"adam step: missing gradient for '{name}'")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name, p in self.params.items():
            m = arrays[f"adam.m.{name}"]
            v = arrays[f"adam.v.{name}"]
            if m.shape != p.data.shape or v.shape != p.data.shape:
                raise ShapeError(f"adam state shape mismatch for '{name}'")
            self.m[name] = m.copy()
            self.v[name] = v.copy()
        self.step_count = step_count


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if max_norm > 0.0 and norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# gradient checking


def gradcheck(f, x: Tensor, h: float = 1e-4) -> float:
    """Max relative error of the tape gradient vs central finite differences.

    ``f`` must map a Tensor to a scalar Tensor and must read the probed input
    only through its argument. Relative error per coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    probe = Tensor(x.data, requires_grad=True)
    with Graph() as g:
        y = f(probe)
    if y.data.size != 1:
        raise UsageError("gradcheck: f must be scalar-valued")
    backward(g, y)
    analytic = probe.grad.ravel().copy()

    flat = x.data.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        bumped = x.data.copy()
        bumped.ravel()[i] = flat[i] + h
        fp = f(Tensor(bumped)).item()
        bumped.ravel()[i] = flat[i] - h
        fm = f(Tensor(bumped)).item()
        numeric[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# parameter archive

_ARCHIVE_MAGIC = "iotrl-params"


def save_archive(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays: one JSON manifest line, then raw data.

    The manifest lists (name, shape, offset) sorted by name; data is raw
    little-endian 64-bit floats in row-major order. Round-trips bit-exactly.
    """
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = _contig(arrays[name])
        raw = arr.astype("<f8", copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format": _ARCHIVE_MAGIC, "version": 1, "entries": entries}
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for raw in blobs:
            fh.write(raw)


def load_archive(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    head, _, data = blob.partition(b"\n")
    manifest = json.loads(head.decode("utf-8"))
    if manifest.get("format") != _ARCHIVE_MAGIC:
        raise UsageError(f"{path}: not a parameter archive")
    out = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=start)
        out[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return out


def save_params(path, params: dict[str, Tensor]) -> None:
    save_archive(path, {k: p.data for k, p in params.items()})


def load_params(path, params: dict[str, Tensor]) -> None:
    """Load an archive into an existing named parameter collection."""
    arrays = load_archive(path)
    for name, p in params.items():
        if name not in arrays:
            raise UsageError(f"archive missing parameter '{name}'")
        if arrays[name].shape != p.data.shape:
            raise ShapeError(
                f"archive shape mismatch for '{name}': "
                f"{arrays[name].shape} vs {p.data.shape}"
            )
        p.data = np.ascontiguousarray(arrays[name])
