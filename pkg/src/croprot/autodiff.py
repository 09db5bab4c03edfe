"""Minimal dense-tensor algebra with reverse-mode automatic differentiation.

Just enough machinery for MLPs, softmax attention, set pooling and
concatenation: values are stored in float32 (float64 available for
verification runs), reductions accumulate in float64, and every primitive
records a backward rule on an explicit tape.  No broadcasting beyond
bias-add; shapes are checked eagerly.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError

DEFAULT_DTYPE = np.float32


class Tape:
    """Ordered record of primitive ops; inputs always precede their op."""

    def __init__(self):
        self.ops = []  # (out, inputs, backward_fn)

    def record(self, out, inputs, backward_fn):
        self.ops.append((out, inputs, backward_fn))


class Tensor:
    """Immutable n-d array of reals, optionally attached to a tape."""

    __slots__ = ("data", "tape", "grad", "param")

    def __init__(self, data, tape=None, param=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.tape = tape
        self.param = param
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def parameter(data, tape, dtype=None):
    return Tensor(data, tape=tape, param=True, dtype=dtype)


def _result(data, inputs, backward_fn):
    tape = None
    for t in inputs:
        if t.tape is not None:
            tape = t.tape
            break
    out = Tensor.__new__(Tensor)
    out.data = data
    out.tape = tape
    out.param = False
    out.grad = None
    if tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul: 2-d operands required")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: inner dims {a.data.shape[1]} != {b.data.shape[0]}"
        )
    out = a.data @ b.data

    def bwd(g):
        return [g @ b.data.T, a.data.T @ g]

    return _result(out, [a, b], bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def bwd(g):
        return [g, g]

    return _result(a.data + b.data, [a, b], bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def bwd(g):
        return [g, -g]

    return _result(a.data - b.data, [a, b], bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def bwd(g):
        return [g * b.data, g * a.data]

    return _result(a.data * b.data, [a, b], bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-vector bias added to every row of a 2-d tensor."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"add_bias: incompatible shapes {x.data.shape}, {b.data.shape}"
        )
    dtype = x.data.dtype

    def bwd(g):
        return [g, g.sum(axis=0, dtype=np.float64).astype(dtype)]

    return _result(x.data + b.data[None, :], [x, b], bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        return [g * c]

    return _result(x.data * x.data.dtype.type(c), [x], bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # derivative at 0 is 0

    def bwd(g):
        return [g * mask]

    return _result(np.where(mask, x.data, 0), [x], bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = x.data.shape

    def bwd(g):
        return [g.reshape(orig)]

    return _result(x.data.reshape(shape), [x], bwd)


def concat(tensors, axis=-1) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return list(np.split(g, splits, axis=axis))

    return _result(out, tensors, bwd)


def softmax(x: Tensor, axis=-1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True, dtype=np.float64).astype(x.data.dtype)

    def bwd(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return [y * (g - inner)]

    return _result(y, [x], bwd)


def log_softmax(x: Tensor, axis=-1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(
        np.exp(shifted).sum(axis=axis, keepdims=True, dtype=np.float64)
    ).astype(x.data.dtype)
    y = shifted - lse
    p = np.exp(y)

    def bwd(g):
        return [g - p * g.sum(axis=axis, keepdims=True)]

    return _result(y, [x], bwd)


def pick(x: Tensor, idx) -> Tensor:
    """Select one column per row of a 2-d tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != x.data.shape[0]:
        raise DimensionError("pick: expects (N, L) tensor and N indices")
    if idx.min(initial=0) < 0 or (idx.size and idx.max() >= x.data.shape[1]):
        raise ContractError("pick: index out of range")
    rows = np.arange(x.data.shape[0])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return [gx]

    return _result(x.data[rows, idx], [x], bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(
        x.data.sum(dtype=np.float64) / n, dtype=x.data.dtype
    )

    def bwd(g):
        return [np.full_like(x.data, g / n)]

    return _result(out, [x], bwd)


def mean_std_pool(x: Tensor, axis) -> Tensor:
    """Pool (mean || std) over one axis; the two halves concatenate on the
    pooled axis' position.  Population std; zero-variance slices pool to 0
    with a zero gradient."""
    n = x.data.shape[axis]
    dtype = x.data.dtype
    mean = x.data.mean(axis=axis, dtype=np.float64)
    centered = x.data - np.expand_dims(mean.astype(dtype), axis)
    var = np.square(centered).mean(axis=axis, dtype=np.float64)
    std = np.sqrt(var)
    out = np.concatenate([mean, std], axis=-1).astype(dtype)
    safe = np.where(std > 0, std, 1.0).astype(dtype)
    mean = mean.astype(dtype)
    std32 = std.astype(dtype)

    def bwd(g):
        gm, gs = np.split(g, 2, axis=-1)
        gx = np.broadcast_to(np.expand_dims(gm / n, axis), x.data.shape).copy()
        gx += np.expand_dims(gs / (n * safe), axis) * centered
        return [gx]

    return _result(out, [x], bwd)


def einsum2(expr: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum; every subscript must appear in at least two of
    (a, b, out), which holds for all attention contractions used here."""
    lhs, out_sub = expr.split("->")
    a_sub, b_sub = lhs.split(",")
    out = np.einsum(expr, a.data, b.data)

    def bwd(g):
        ga = np.einsum(f"{out_sub},{b_sub}->{a_sub}", g, b.data)
        gb = np.einsum(f"{out_sub},{a_sub}->{b_sub}", g, a.data)
        return [ga, gb]

    return _result(out, [a, b], bwd)


@contextmanager
def recording(params):
    """Attach a fresh tape to the given parameters for one forward pass."""
    tape = Tape()
    for p in params:
        p.tape = tape
    try:
        yield tape
    finally:
        for p in params:
            p.tape = None


# ---------------------------------------------------------------------------
# backward pass and verification


def backward(tape: Tape, loss: Tensor, params=None):
    """Reverse sweep over the tape; returns {tensor: gradient}.

    Parameters not reachable from the loss get zero gradients when listed
    in `params`.  Also populates `.grad` on parameter tensors.
    """
    if loss.data.size != 1:
        raise ContractError("backward: loss must be scalar")
    grads = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}
    for out, inputs, bwd in reversed(tape.ops):
        g = grads.get(id(out))
        if g is None:
            continue
        for t, gi in zip(inputs, bwd(g)):
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                holders[key] = t
    result = {holders[k]: v for k, v in grads.items()}
    if params is not None:
        for p in params:
            if p not in result:
                result[p] = np.zeros_like(p.data)
    for t, g in result.items():
        if t.param:
            t.grad = g
    return result


def relative_error(analytic, numeric):
    analytic = float(analytic)
    numeric = float(numeric)
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def finite_diff_check(f, params, eps=1e-3):
    """Max relative error between reverse-mode and central differences.

    `f(param_arrays) -> (loss Tensor, param Tensors)` must be deterministic;
    `params` is a list of numpy arrays, evaluated in float64 so the
    difference quotient stays meaningful at eps ~ 1e-3.
    """
    arrays = [np.array(p, dtype=np.float64) for p in params]

    loss, tensors = f(arrays)
    grads = backward(loss.tape, loss, params=tensors)
    worst = 0.0
    for k, p in enumerate(arrays):
        g_flat = np.asarray(grads[tensors[k]], dtype=np.float64).reshape(-1)
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = float(f(arrays)[0].data)
            flat[j] = orig - eps
            dn = float(f(arrays)[0].data)
            flat[j] = orig
            numeric = (up - dn) / (2 * eps)
            worst = max(worst, relative_error(g_flat[j], numeric))
    return worst
