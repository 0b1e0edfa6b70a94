"""Dense float64 tensors with reverse-mode differentiation and Adam.

A Tape owns one forward pass: parameters are wrapped with tape.leaf(...),
ops record themselves when any input is being traced, and backward(loss)
returns a gradient map for that tape only. Gradients of tensors that were
never put on the tape are never written, by construction.

Sparse support is a single op, CSR x dense, which is all the graph
propagation here needs; everything else is dense numpy.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericError, ShapeError


class Tensor:
    """Value plus optional tape handle; .value is the raw ndarray."""

    __slots__ = ("value", "requires_grad", "tape", "node_id")

    def __init__(self, value, requires_grad=False, tape=None, node_id=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return float(self.value)

    def __repr__(self):
        traced = "traced" if self.tape is not None else "const"
        return f"Tensor(shape={self.shape}, {traced})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered op record for one forward pass; single-owner, not shared."""

    def __init__(self):
        self._records = []
        self._next_id = 0
        self._leaf_ids = []

    def _fresh(self):
        nid = self._next_id
        self._next_id += 1
        return nid

    def leaf(self, value) -> Tensor:
        t = Tensor(value, requires_grad=True, tape=self, node_id=self._fresh())
        self._leaf_ids.append(t.node_id)
        return t

    def leaves(self, named: dict) -> dict:
        return {k: self.leaf(v) for k, v in named.items()}

    def record(self, out_value, inputs, backward_fn) -> Tensor:
        out = Tensor(out_value, requires_grad=True, tape=self, node_id=self._fresh())
        self._records.append((out.node_id, [t.node_id for t in inputs], backward_fn))
        return out


class Grads:
    """Gradient map keyed by tape node id; zeros for untouched leaves."""

    def __init__(self, tape, table):
        self._tape = tape
        self._table = table

    def of(self, tensor: Tensor) -> np.ndarray:
        if tensor.tape is not self._tape or tensor.node_id is None:
            raise InputError("tensor does not belong to this tape")
        g = self._table.get(tensor.node_id)
        if g is None:
            return np.zeros_like(tensor.value)
        return g

    def named(self, leaves: dict) -> dict:
        return {k: self.of(t) for k, t in leaves.items()}


def backward(loss: Tensor) -> Grads:
    """Reverse pass from a scalar loss over its tape."""
    if loss.tape is None:
        raise InputError("loss is not attached to a tape")
    if loss.value.size != 1:
        raise InputError(f"loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    table = {loss.node_id: np.ones_like(loss.value)}
    for out_id, in_ids, backward_fn in reversed(tape._records):
        g_out = table.get(out_id)
        if g_out is None:
            continue
        for nid, g in zip(in_ids, backward_fn(g_out)):
            if g is None or nid is None:
                continue
            acc = table.get(nid)
            table[nid] = g if acc is None else acc + g
    return Grads(tape, table)


# ---------------------------------------------------------------------------
# Op plumbing


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _tape_of(op, *tensors):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise InputError(f"{op}: inputs live on different tapes")
            tape = t.tape
    return tape


def _emit(op, out_value, inputs, backward_fn) -> Tensor:
    tape = _tape_of(op, *inputs)
    if tape is None:
        return Tensor(out_value)
    return tape.record(out_value, inputs, backward_fn)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Core ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.value + b.value
    except ValueError:
        raise ShapeError("add", f"{a.shape} vs {b.shape}")
    return _emit(
        "add",
        out,
        [a, b],
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.value - b.value
    except ValueError:
        raise ShapeError("sub", f"{a.shape} vs {b.shape}")
    return _emit(
        "sub",
        out,
        [a, b],
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", -a.value, [a], lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.value * b.value
    except ValueError:
        raise ShapeError("mul", f"{a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return _emit(
        "mul",
        out,
        [a, b],
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"{a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _emit(
        "matmul", av @ bv, [a, b], lambda g: (g @ bv.T, av.T @ g)
    )


def sparse_matmul(csr, x) -> Tensor:
    """CSR (n x n, non-differentiable) times dense (n x d)."""
    x = _as_tensor(x)
    if x.value.ndim != 2 or csr.shape[1] != x.shape[0]:
        raise ShapeError("sparse_matmul", f"{csr.shape} @ {x.shape}")
    out = csr.matmul_dense(x.value)
    csr_t = csr.transpose()
    return _emit("sparse_matmul", out, [x], lambda g: (csr_t.matmul_dense(g),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"{a.shape} -> {shape}")
    src = a.shape
    return _emit("reshape", out.copy(), [a], lambda g: (g.reshape(src),))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.value.ndim != 2:
        raise ShapeError("transpose", f"expected 2-d, got {a.shape}")
    return _emit("transpose", a.value.T.copy(), [a], lambda g: (g.T,))


def concat(tensors, axis=0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise InputError("concat: empty input list")
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", f"{[t.shape for t in ts]} along axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _emit(
        "concat", out, ts, lambda g: tuple(np.split(g, splits, axis=axis))
    )


def slice_rows(a, start, stop) -> Tensor:
    a = _as_tensor(a)
    n = a.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError("slice_rows", f"[{start}:{stop}] of {n} rows")
    av = a.value

    def back(g):
        full = np.zeros_like(av)
        full[start:stop] = g
        return (full,)

    return _emit("slice_rows", av[start:stop].copy(), [a], back)


def gather_rows(a, idx) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("gather_rows", f"index out of range for {a.shape[0]} rows")
    av = a.value

    def back(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("gather_rows", av[idx], [a], back)


def tsum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    av = a.value
    out = av.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.full(av.shape, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), av.shape).copy(),)

    return _emit("sum", out, [a], back)


def tmean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    av = a.value
    count = av.size if axis is None else av.shape[axis]
    out = av.mean(axis=axis)

    def back(g):
        if axis is None:
            return (np.full(av.shape, g / count),)
        return (np.broadcast_to(np.expand_dims(g, axis), av.shape).copy() / count,)

    return _emit("mean", out, [a], back)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    av = a.value
    out = np.where(av >= 0, 1.0 / (1.0 + np.exp(-np.maximum(av, 0))),
                   np.exp(np.minimum(av, 0)) / (1.0 + np.exp(np.minimum(av, 0))))
    return _emit("sigmoid", out, [a], lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.value > 0
    return _emit("relu", a.value * mask, [a], lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.value)
    return _emit("exp", out, [a], lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    av = a.value
    return _emit("log", np.log(av), [a], lambda g: (g / av,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    av = a.value
    return _emit("square", av * av, [a], lambda g: (g * 2.0 * av,))


def clip(a, lo, hi) -> Tensor:
    """Value clamp; gradient is zero outside [lo, hi]."""
    a = _as_tensor(a)
    av = a.value
    mask = (av >= lo) & (av <= hi)
    return _emit("clip", np.clip(av, lo, hi), [a], lambda g: (g * mask,))


def dropout(a, rate, rng, training=True) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise InputError(f"dropout rate must be in [0, 1), got {rate}")
    a = _as_tensor(a)
    if not training or rate == 0.0:
        return a
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", a.value * mask, [a], lambda g: (g * mask,))


def bce_with_logits(logits, targets, weights=None, reduction="mean") -> Tensor:
    """Numerically stable binary cross-entropy on logits.

    targets (and optional weights) are constants with the same shape as the
    logits; reduction is "mean", "sum", or "none".
    """
    logits = _as_tensor(logits)
    lv = logits.value
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != lv.shape:
        raise ShapeError("bce_with_logits", f"logits {lv.shape} vs targets {t.shape}")
    w = None
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != lv.shape:
            raise ShapeError("bce_with_logits", f"logits {lv.shape} vs weights {w.shape}")
    loss = np.maximum(lv, 0.0) - lv * t + np.log1p(np.exp(-np.abs(lv)))
    if w is not None:
        loss = loss * w
    if reduction == "none":
        out = loss
    elif reduction == "sum":
        out = loss.sum()
    elif reduction == "mean":
        out = loss.mean()
    else:
        raise InputError(f"unknown reduction {reduction!r}")

    sig = np.where(lv >= 0, 1.0 / (1.0 + np.exp(-np.maximum(lv, 0))),
                   np.exp(np.minimum(lv, 0)) / (1.0 + np.exp(np.minimum(lv, 0))))
    base = sig - t
    if w is not None:
        base = base * w

    def back(g):
        if reduction == "none":
            return (g * base,)
        if reduction == "sum":
            return (g * base,)
        return (g * base / lv.size,)

    return _emit("bce_with_logits", out, [logits], back)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One bias-corrected Adam update, in place on the parameter arrays."""
    for name, g in grads.items():
        if np.isnan(g).any() or np.isinf(g).any():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correct1 = 1.0 - b1 ** state.step
    correct2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError("adam_step", f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / correct1) / (np.sqrt(v / correct2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# Checkpoints: magic, version, named float64 tables, optional Adam state.

_MAGIC = b"CLNKCKPT"
_VERSION = 1


def _write_array(fh, name, arr):
    enc = name.encode("utf-8")
    fh.write(struct.pack("<H", len(enc)))
    fh.write(enc)
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<q", d))
    fh.write(arr.astype("<f8").tobytes())


def _read_array(fh):
    (nlen,) = struct.unpack("<H", fh.read(2))
    name = fh.read(nlen).decode("utf-8")
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = tuple(struct.unpack("<q", fh.read(8))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape).copy()
    return name, data


def save_checkpoint(path, named: dict, adam: AdamState = None):
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(named)))
        for name in sorted(named):
            _write_array(fh, name, named[name])
        fh.write(struct.pack("<B", 1 if adam is not None else 0))
        if adam is not None:
            fh.write(struct.pack("<dddd", adam.lr, adam.beta1, adam.beta2, adam.eps))
            fh.write(struct.pack("<Q", adam.step))
            fh.write(struct.pack("<I", len(adam.m)))
            for name in sorted(adam.m):
                _write_array(fh, name, adam.m[name])
                _write_array(fh, name, adam.v[name])


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise InputError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise InputError(f"{path}: unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", fh.read(4))
        named = {}
        for _ in range(count):
            name, arr = _read_array(fh)
            named[name] = arr
        (has_adam,) = struct.unpack("<B", fh.read(1))
        adam = None
        if has_adam:
            lr, b1, b2, eps = struct.unpack("<dddd", fh.read(32))
            (step,) = struct.unpack("<Q", fh.read(8))
            (acount,) = struct.unpack("<I", fh.read(4))
            adam = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=step)
            for _ in range(acount):
                name, m = _read_array(fh)
                _, v = _read_array(fh)
                adam.m[name] = m
                adam.v[name] = v
    return named, adam
