"""Dense reverse-mode differentiation on float64 numpy arrays.

Operations record themselves on the active :class:`Tape` when at least one
input requires a gradient. The tape is rebuilt for every forward pass::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = sum_(relu(matmul(x, w)))
    tape.backward(loss)
    w.grad
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "tape_id")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations (define-by-run)."""

    def __init__(self, track_kinks: bool = False):
        self.records: list[_Record] = []
        self.track_kinks = track_kinks
        self.kinks: list[np.ndarray] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward) -> Tensor:
        out.requires_grad = True
        out.tape_id = len(self.records)
        self.records.append(_Record(out, parents, backward))
        return out

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every leaf reached from ``loss``; frees the record."""
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape_id is None or loss.tape_id >= len(self.records) or self.records[loss.tape_id].out is not loss:
            raise ValueError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records[:loss.tape_id + 1]):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for p, gp in zip(rec.parents, rec.backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                if p.tape_id is None:
                    leaves[id(p)] = p
                k = id(p)
                grads[k] = grads[k] + gp if k in grads else gp
        for k, leaf in leaves.items():
            leaf.grad = grads[k]
        self.records.clear()
        self.kinks.clear()

    def gradients(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients w.r.t. ``params`` (zeros for parameters the loss does not reach)."""
        for p in params:
            p.grad = None
        self.backward(loss)
        return [np.zeros_like(p.value) if p.grad is None else p.grad for p in params]


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _active(*xs: Tensor) -> Tape | None:
    if _TAPES and any(x.requires_grad for x in xs):
        return _TAPES[-1]
    return None


def _op(value: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(value)
    tape = _active(*parents)
    if tape is not None:
        tape.record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _op(a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _op(a.value - b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _op(a.value * b.value, (a, b),
               lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _op(a.value * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    tape = _active(a)
    if tape is not None and tape.track_kinks:
        tape.kinks.append(mask)
    # np.maximum keeps NaN visible; a masked select would silently zero it
    return _op(np.maximum(a.value, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    v = np.exp(a.value)
    return _op(v, (a,), lambda g: (g * v,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _op(np.log(a.value), (a,), lambda g: (g / a.value,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _op(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))


# ---------------------------------------------------------------------------
# shape / reductions

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.ndim == 2 and b.ndim == 2:
        return _op(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))
    out = np.matmul(a.value, b.value)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _op(out, (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T (+ b)`` for x (n, k), w (m, k), b (m,), as one recorded op."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    out = x.value @ w.value.T
    if b is None:
        return _op(out, (x, w), lambda g: (g @ w.value, g.T @ x.value))
    b = as_tensor(b)
    if b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias shape {b.shape} for weight {w.shape}")
    return _op(out + b.value, (x, w, b), lambda g: (g @ w.value, g.T @ x.value, g.sum(axis=0)))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _op(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _op(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat(axis={axis}): incompatible shapes {[x.shape for x in xs]}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _op(out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _op(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def row_mean(a) -> Tensor:
    """Mean over the leading (row) axis."""
    return mean(a, axis=0)


def take(a, idx, axis: int = 0) -> Tensor:
    """Gather along ``axis`` (rows by default); gradients scatter-add back."""
    a = as_tensor(a)
    if isinstance(idx, (tuple, slice)) or (not isinstance(idx, (list, np.ndarray)) and not np.isscalar(idx)):
        out = a.value[idx]

        def bw_basic(g):
            full = np.zeros_like(a.value)
            np.add.at(full, idx, g)
            return (full,)
        return _op(out, (a,), bw_basic)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.take(a.value, idx, axis=axis)
    if axis != 0:
        def bw_axis(g):
            full = np.zeros_like(a.value)
            sl = [slice(None)] * a.ndim
            sl[axis] = idx
            np.add.at(full, tuple(sl), g)
            return (full,)
        return _op(out, (a,), bw_axis)
    return _op(out, (a,), lambda g: (scatter_rows(idx.ravel(), g.reshape(idx.size, *a.shape[1:]), a.shape[0]),))


def scatter_rows(idx: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """``out[idx[k]] += values[k]`` for k in order, as a dense (n, ...) array."""
    idx = np.asarray(idx, dtype=np.int64)
    if values.ndim == 1:
        return np.bincount(idx, weights=values, minlength=n).astype(np.float64)
    flat = values.reshape(len(idx), -1)
    if len(idx) == 0:
        return np.zeros((n,) + values.shape[1:])
    m = sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n, len(idx)))
    return np.asarray(m @ flat).reshape((n,) + values.shape[1:])


def segment_sum(a, segments, n: int) -> Tensor:
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.int64)
    if len(segments) != a.shape[0]:
        raise ShapeError(f"segment_sum: {len(segments)} segment ids for shape {a.shape}")
    return _op(scatter_rows(segments, a.value, n), (a,), lambda g: (g[segments],))


def rowdot(a, b) -> Tensor:
    """Row-wise inner products of two (n, d) arrays."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"rowdot: shapes {a.shape} and {b.shape}")
    return _op(np.einsum("ij,ij->i", a.value, b.value), (a, b),
               lambda g: (g[:, None] * b.value, g[:, None] * a.value))


def weighted_segment_sum(weights, a, segments, n: int) -> Tensor:
    """``out[s] = sum over rows k with segments[k] == s of weights[k] * a[k]``."""
    w, a = as_tensor(weights), as_tensor(a)
    segments = np.asarray(segments, dtype=np.int64)
    if w.ndim != 1 or a.ndim != 2 or not len(segments) == len(w.value) == a.shape[0]:
        raise ShapeError(f"weighted_segment_sum: weights {w.shape}, values {a.shape}, {len(segments)} ids")
    m = sp.csr_matrix((w.value, (segments, np.arange(len(segments)))), shape=(n, len(segments)))
    out = np.asarray(m @ a.value) if len(segments) else np.zeros((n, a.shape[1]))

    def bw(g):
        gs = g[segments]
        return np.einsum("ij,ij->i", gs, a.value), w.value[:, None] * gs
    return _op(out, (w, a), bw)


def segment_softmax(logits, segments, n: int) -> Tensor:
    """Softmax of a 1-D array within groups given by ``segments``."""
    x = as_tensor(logits)
    segments = np.asarray(segments, dtype=np.int64)
    if x.ndim != 1 or len(segments) != len(x.value):
        raise ShapeError(f"segment_softmax: logits {x.shape} vs {len(segments)} segment ids")
    mx = np.full(n, -np.inf)
    np.maximum.at(mx, segments, x.value)
    e = np.exp(x.value - mx[segments])
    s = np.bincount(segments, weights=e, minlength=n)
    p = e / s[segments]

    def bw(g):
        gp = np.bincount(segments, weights=g * p, minlength=n)
        return (p * (g - gp[segments]),)
    return _op(p, (x,), bw)


def logsumexp(a, axis: int = -1) -> Tensor:
    """Max-shifted log-sum-exp."""
    a = as_tensor(a)
    m = np.max(a.value, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(a.value - m).sum(axis=axis, keepdims=True)
    out = (np.log(s) + m)

    def bw(g):
        sm = np.exp(a.value - out)
        return (np.expand_dims(g, axis) * sm,)
    return _op(np.squeeze(out, axis=axis), (a,), bw)


def squared_distances(rows, prototypes) -> Tensor:
    """Pairwise squared Euclidean distances, (..., q, d) x (..., c, d) -> (..., q, c)."""
    x, p = as_tensor(rows), as_tensor(prototypes)
    if x.shape[-1] != p.shape[-1] or x.shape[:-2] != p.shape[:-2]:
        raise ShapeError(f"squared_distances: incompatible shapes {x.shape} and {p.shape}")
    diff = x.value[..., :, None, :] - p.value[..., None, :, :]
    out = np.einsum("...qcd,...qcd->...qc", diff, diff)

    def bw(g):
        gd = 2.0 * g[..., None] * diff
        return gd.sum(axis=-2), -gd.sum(axis=-3)
    return _op(out, (x, p), bw)


def nll_from_distances(sq_dist, labels) -> Tensor:
    """Per-row ``-log softmax(-d2)[label]``, computed as d2[label] + logsumexp(-d2)."""
    d = as_tensor(sq_dist)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != d.shape[:-1]:
        raise ShapeError(f"nll_from_distances: labels {labels.shape} vs distances {d.shape}")
    neg = -d.value
    m = neg.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(neg - m).sum(axis=-1)) + m[..., 0]
    true = np.take_along_axis(d.value, labels[..., None], axis=-1)[..., 0]
    out = true + lse

    def bw(g):
        soft = np.exp(neg - lse[..., None])
        onehot = np.zeros_like(soft)
        np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
        return (g[..., None] * (onehot - soft),)
    return _op(out, (d,), bw)


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits (numerically stable)."""
    x = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    v = x.value
    out = np.maximum(v, 0.0) - v * y + np.log1p(np.exp(-np.abs(v)))

    def bw(g):
        sig = np.where(v >= 0, 1.0 / (1.0 + np.exp(-v)), np.exp(v) / (1.0 + np.exp(v)))
        return (g * (sig - y),)
    return _op(out, (x,), bw)


# ---------------------------------------------------------------------------
# checking and optimization

@dataclass
class GradCheck:
    """Per-coordinate comparison of reverse-mode and central-difference gradients.

    Coordinates whose +-eps perturbation flips a relu input sign are dropped.
    """
    analytic: np.ndarray
    numeric: np.ndarray
    loss: float
    eps: float

    @property
    def relative(self) -> np.ndarray:
        a, n = self.analytic, self.numeric
        return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))

    @property
    def noise_floor(self) -> float:
        """Bound on central-difference round-off: 64 ulps of the loss over 2 eps."""
        return 64 * np.finfo(float).eps * max(1.0, abs(self.loss)) / (2 * self.eps)

    def max_relative(self) -> float:
        return float(self.relative.max()) if self.relative.size else 0.0

    def mismatched(self, rtol: float) -> np.ndarray:
        """Coordinates off by more than ``rtol`` relative error and more than round-off can explain."""
        return (self.relative > rtol) & (np.abs(self.analytic - self.numeric) > self.noise_floor)


def grad_check_coords(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0) -> GradCheck:
    """Compare gradients of the scalar ``f()`` w.r.t. ``params`` coordinate by coordinate."""
    with Tape(track_kinks=True) as tape:
        loss = f()
        base = [m.copy() for m in tape.kinks]
        grads = tape.gradients(loss, params)

    def probe() -> tuple[float, bool]:
        with Tape(track_kinks=True) as t:
            val = float(f().value)
            same = len(t.kinks) == len(base) and all(np.array_equal(a, b) for a, b in zip(t.kinks, base))
        return val, same

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.value.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        coords = [coords[k] for k in rng.choice(len(coords), size=max_coords, replace=False)]
    g_ad, g_fd = [], []
    for i, j in coords:
        flat = params[i].value.reshape(-1)
        old = flat[j]
        flat[j] = old + eps
        fp, ok_p = probe()
        flat[j] = old - eps
        fm, ok_m = probe()
        flat[j] = old
        if not (ok_p and ok_m):
            continue
        g_fd.append((fp - fm) / (2 * eps))
        g_ad.append(grads[i].reshape(-1)[j])
    return GradCheck(np.array(g_ad), np.array(g_fd), float(loss.value), eps)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` builds the scalar loss from ``params`` (called inside a fresh tape).
    Coordinates whose +-eps perturbation flips any relu input sign are skipped.
    """
    return grad_check_coords(f, params, eps, max_coords, seed).max_relative()


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState | None,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update applied in place to ``params``."""
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if state is None or not state.m:
        state = AdamState([np.zeros_like(p.value) for p in params], [np.zeros_like(p.value) for p in params], 0)
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ShapeError(f"adam_step: param shape {p.shape} vs grad shape {np.shape(g)}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------------------
# checkpoints: <prefix>.bin holds little-endian float64 arrays back to back,
# <prefix>.json maps name -> {shape, offset (bytes)}

def save_checkpoint(prefix: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    index, offset = {}, 0
    with open(prefix.with_suffix(".bin"), "wb") as f:
        for name, arr in arrays.items():
            buf = np.ascontiguousarray(arr, dtype="<f8")
            f.write(buf.tobytes())
            index[name] = {"shape": list(buf.shape), "offset": offset}
            offset += buf.nbytes
    with open(prefix.with_suffix(".json"), "w") as f:
        json.dump({"dtype": "<f8", "arrays": index, "meta": meta or {}}, f, indent=1)
    return prefix


def load_checkpoint(prefix: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    prefix = Path(prefix)
    with open(prefix.with_suffix(".json")) as f:
        doc = json.load(f)
    raw = prefix.with_suffix(".bin").read_bytes()
    out = {}
    for name, e in doc["arrays"].items():
        n = int(np.prod(e["shape"]))
        out[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"]).astype(np.float64)
    return out, doc.get("meta", {})
