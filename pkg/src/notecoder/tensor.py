"""Dense tensors with a recorded forward tape and reverse-mode gradients.

The engine is deliberately small: float64 numpy arrays, a thread-local
tape of executed operations, and one backward walk over the tape in
reverse. It covers exactly the operations the document encoders, the
convolution baselines, and the attention heads need.

Recording model: while a `Tape` is active (entered as a context manager)
every operation whose inputs require gradients appends one node. With no
active tape nothing is recorded and forward passes run in plain numpy,
which is what evaluation mode uses.

Example::

    w = Tensor([[0.5], [-0.2]], requires_grad=True)
    with Tape() as tape:
        loss = (matmul(x, w) - y).pow(2).sum()
    backward(tape, loss)
    # w.grad now holds dloss/dw
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericsError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "pow_",
    "exp",
    "log",
    "matmul",
    "transpose",
    "reshape",
    "narrow",
    "concat",
    "sum_",
    "mean",
    "sigmoid",
    "relu",
    "tanh",
    "softmax",
    "clamp",
    "dropout",
    "conv1d",
    "max_pool_over_time",
    "embedding_lookup",
    "layer_norm",
    "multi_head_attention",
    "grad_check",
    "GradCheckReport",
]

MASK_FILL = -1e9  # additive bias for excluded attention positions


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """A dense n-dimensional float array, optionally tracked for gradients.

    `data` is always a contiguous float ndarray (float64 unless the
    caller passes something narrower on purpose). `grad` is filled by
    `backward` and accumulates across calls until reset with
    `zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, *, _validate: bool = True):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        if _validate and not np.all(np.isfinite(self.data)):
            raise NumericsError("tensor initialized with non-finite values")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; scalars are wrapped as constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def pow(self, p: float):
        return pow_(self, p)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    output: Tensor
    backward_fn: object  # callable: out_grad -> tuple of input grads


class Tape:
    """Append-only record of executed operations, in execution order.

    Execution order is a topological order, so one reversed walk visits
    every node exactly once with all downstream gradients ready. Tapes
    are confined to the thread that recorded them.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()

    def __enter__(self) -> "Tape":
        _STATE.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _STATE.stack.pop()
        assert popped is self, "tapes must be exited in LIFO order"


class _ThreadState(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []
        self.grad_enabled = True


_STATE = _ThreadState()


def _active_tape() -> Tape | None:
    if not _STATE.grad_enabled or not _STATE.stack:
        return None
    return _STATE.stack[-1]


class no_grad:
    """Context manager that suppresses tape recording."""

    def __enter__(self):
        self._prev = _STATE.grad_enabled
        _STATE.grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.grad_enabled = self._prev


def _make_output(op: str, data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    out.grad = None
    tape = _active_tape()
    if tape is not None and any(
        isinstance(x, Tensor) and x.requires_grad for x in inputs
    ):
        out.requires_grad = True
        tape.nodes.append(TapeNode(op, inputs, out, backward_fn))
    else:
        out.requires_grad = False
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate dloss/dx into `x.grad` for every recorded tensor.

    `loss` must be a scalar on the tape (or a leaf). Gradients add into
    any existing `.grad`, so calling twice without `zero_grad` doubles
    them.
    """
    if loss.size != 1:
        raise ShapeError(f"backward seed must be scalar, got shape {loss.shape}")
    grads: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data)]}
    for node in reversed(tape.nodes):
        entry = grads.get(id(node.output))
        if entry is None:
            continue
        in_grads = node.backward_fn(entry[1])
        for inp, g in zip(node.inputs, in_grads):
            if g is None or not isinstance(inp, Tensor):
                continue
            slot = grads.get(id(inp))
            if slot is None:
                grads[id(inp)] = [inp, np.array(g, dtype=inp.data.dtype)]
            else:
                slot[1] = slot[1] + g
    for tensor, g in grads.values():
        if tensor.requires_grad:
            tensor.grad = g if tensor.grad is None else tensor.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape` by summing."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make_output("add", a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make_output("sub", a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make_output("mul", a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make_output("div", a.data / b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _make_output("neg", -a.data, (a,), lambda g: (-g,))


def pow_(a: Tensor, p: float) -> Tensor:
    out_data = a.data**p

    def bwd(g):
        return (g * p * a.data ** (p - 1),)

    return _make_output("pow", out_data, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        return (g * out_data,)

    return _make_output("exp", out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        return (g / a.data,)

    return _make_output("log", np.log(a.data), (a,), bwd)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make_output("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make_output(
        "mean", a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd
    )


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _make_output("matmul", a.data @ b.data, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _make_output("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return _make_output("reshape", a.data.reshape(shape), (a,), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis`."""
    if not (0 <= axis < a.ndim):
        raise ShapeError(f"narrow axis {axis} invalid for shape {a.shape}")
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}) out of range for axis {axis} "
            f"of shape {a.shape}"
        )
    index = tuple(
        slice(start, start + length) if i == axis else slice(None)
        for i in range(a.ndim)
    )

    def bwd(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make_output("narrow", a.data[index], (a,), bwd)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty tensor list")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for i, t in enumerate(tensors):
            index = tuple(
                slice(offsets[i], offsets[i + 1]) if d == axis else slice(None)
                for d in range(t.ndim)
            )
            pieces.append(g[index])
        return tuple(pieces)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make_output("concat", data, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------


def sigmoid(a: Tensor) -> Tensor:
    # piecewise form never exponentiates a positive argument
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), 0.0)
    ex = np.exp(-np.abs(x))
    out_data = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))

    def bwd(g):
        return (g * out_data * (1.0 - out_data),)

    return _make_output("sigmoid", out_data, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0),)

    return _make_output("relu", out_data, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out_data * out_data),)

    return _make_output("tanh", out_data, (a,), bwd)


def softmax(a: Tensor, axis: int) -> Tensor:
    """Exponent-normalize along `axis`; stable via per-slice max subtraction."""
    if not (-a.ndim <= axis < a.ndim):
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _make_output("softmax", out_data, (a,), bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out_data = np.clip(a.data, lo, hi)

    def bwd(g):
        return (g * ((a.data > lo) & (a.data < hi)),)

    return _make_output("clamp", out_data, (a,), bwd)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)

    def bwd(g):
        return (g * keep,)

    return _make_output("dropout", a.data * keep, (a,), bwd)


# ---------------------------------------------------------------------------
# Sequence ops
# ---------------------------------------------------------------------------


def conv1d(x: Tensor, w: Tensor, b: Tensor, padding: str = "same") -> Tensor:
    """1-D convolution over the token axis.

    x: [n, d] token embeddings, w: [k, d, f] filters, b: [f] bias.
    "same" padding keeps output length n; "valid" gives n - k + 1 and
    requires k <= n.
    """
    if x.ndim != 2:
        raise ShapeError(f"conv1d input must be [n, d], got {x.shape}")
    n, d = x.shape
    if n == 0:
        raise DataError("conv1d on an empty sequence")
    if w.ndim != 3 or w.shape[1] != d:
        raise ShapeError(f"conv1d weights {w.shape} do not match input {x.shape}")
    k, _, f = w.shape
    if padding == "same":
        left = (k - 1) // 2
        right = k - 1 - left
    elif padding == "valid":
        if k > n:
            raise ShapeError(
                f"valid conv1d needs k <= n, got k={k}, n={n}"
            )
        left = right = 0
    else:
        raise ConfigError(f"unknown padding {padding!r}")

    xp = np.pad(x.data, ((left, right), (0, 0)))
    out_n = xp.shape[0] - k + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, d))[:, 0]
    flat = windows.reshape(out_n, k * d)
    w2 = w.data.reshape(k * d, f)
    out_data = flat @ w2 + b.data

    def bwd(g):
        gw = (flat.T @ g).reshape(k, d, f)
        gb = g.sum(axis=0)
        gflat = g @ w2.T
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[j : j + out_n] += gflat[:, j * d : (j + 1) * d]
        gx = gxp[left : left + n] if right else gxp[left:]
        return gx, gw, gb

    return _make_output("conv1d", out_data, (x, w, b), bwd)


def max_pool_over_time(x: Tensor) -> Tensor:
    """Per-channel max over the token axis; ties route to the lowest index."""
    if x.ndim != 2:
        raise ShapeError(f"max_pool_over_time expects [n, f], got {x.shape}")
    n, f = x.shape
    if n == 0:
        raise DataError("max_pool_over_time on an empty sequence")
    arg = x.data.argmax(axis=0)  # argmax takes the first maximum
    out_data = x.data[arg, np.arange(f)]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[arg, np.arange(f)] = g
        return (gx,)

    return _make_output("max_pool", out_data, (x,), bwd)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of `table`; gradients scatter-add back unless frozen."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"ids must be a flat sequence, got shape {idx.shape}")
    v = table.shape[0]
    bad = np.nonzero((idx < 0) | (idx >= v))[0]
    if bad.size:
        pos = int(bad[0])
        raise DataError(
            f"embedding id {int(idx[pos])} at position {pos} out of range [0, {v})"
        )

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt, None)

    return _make_output("embedding", table.data[idx], (table, idx), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization followed by an affine map.

    Composed from primitive ops, so the gradient comes from the tape.
    """
    mu = mean(x, axis=-1 if x.ndim == 1 else x.ndim - 1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=x.ndim - 1, keepdims=True)
    inv = pow_(add(var, Tensor(np.full(var.shape, eps))), -0.5)
    return add(mul(mul(centered, inv), gain), bias)


def multi_head_attention(
    xq: Tensor,
    xk: Tensor,
    xv: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    *,
    heads: int,
    mask=None,
    return_weights: bool = False,
):
    """Scaled dot-product attention with per-head projections.

    `mask` is a boolean array over key positions; False positions are
    excluded by adding MASK_FILL to their scores before the softmax.
    Head outputs are concatenated and projected by `wo`.
    """
    h = xq.shape[1]
    if h % heads != 0:
        raise ConfigError(f"hidden size {h} not divisible by {heads} heads")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (xk.shape[0],):
            raise ShapeError(
                f"mask length {mask.shape} does not match {xk.shape[0]} keys"
            )
    hs = h // heads
    scale = 1.0 / math.sqrt(hs)
    q = matmul(xq, wq)
    k = matmul(xk, wk)
    v = matmul(xv, wv)
    bias = None
    if mask is not None:
        bias = Tensor(np.where(mask, 0.0, MASK_FILL)[None, :])
    outs = []
    weights = []
    for i in range(heads):
        qi = narrow(q, 1, i * hs, hs)
        ki = narrow(k, 1, i * hs, hs)
        vi = narrow(v, 1, i * hs, hs)
        scores = mul(matmul(qi, transpose(ki)), Tensor(scale))
        if bias is not None:
            scores = add(scores, bias)
        attn = softmax(scores, axis=1)
        weights.append(attn)
        outs.append(matmul(attn, vi))
    out = matmul(concat(outs, axis=1), wo)
    if return_weights:
        return out, weights
    return out


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    checked: int = 0
    note: str = ""
    per_input: list = field(default_factory=list)


def grad_check(
    f,
    inputs: list[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    *,
    subset_threshold: int = 10_000,
    subset_size: int = 500,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of `f` against central differences.

    `f` must build its graph from `inputs` on every call and return a
    scalar Tensor. Every coordinate is checked unless the total
    parameter count exceeds `subset_threshold`, in which case a random
    subset of `subset_size` coordinates is drawn per input. Relative
    error uses |a - n| / max(1, |a|, |n|), so tiny gradients are judged
    on absolute error. Non-finite values produce a failed report rather
    than an exception.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.zero_grad()
    try:
        with Tape() as tape:
            out = f(*inputs)
        if out.size != 1:
            return GradCheckReport(math.inf, False, note="f did not return a scalar")
        if not np.isfinite(out.data).all():
            return GradCheckReport(math.inf, False, note="non-finite forward output")
        backward(tape, out)
    except NumericsError as err:
        return GradCheckReport(math.inf, False, note=str(err))

    analytic = [
        t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]
    total = sum(t.size for t in inputs if t.requires_grad)
    use_subset = total > subset_threshold

    max_err = 0.0
    checked = 0
    per_input = []
    try:
        with no_grad():
            for t, an in zip(inputs, analytic):
                if not t.requires_grad:
                    continue
                flat = t.data.reshape(-1)
                an_flat = np.asarray(an).reshape(-1)
                if use_subset:
                    count = min(subset_size, flat.size)
                    coords = rng.choice(flat.size, size=count, replace=False)
                else:
                    coords = range(flat.size)
                worst = 0.0
                for j in coords:
                    orig = flat[j]
                    flat[j] = orig + step
                    hi = float(f(*inputs).data)
                    flat[j] = orig - step
                    lo = float(f(*inputs).data)
                    flat[j] = orig
                    if not (math.isfinite(hi) and math.isfinite(lo)):
                        return GradCheckReport(
                            math.inf, False, checked, "non-finite probe output"
                        )
                    numeric = (hi - lo) / (2.0 * step)
                    a = float(an_flat[j])
                    err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                    worst = max(worst, err)
                    checked += 1
                per_input.append(worst)
                max_err = max(max_err, worst)
    except NumericsError as err:
        return GradCheckReport(math.inf, False, checked, str(err))

    return GradCheckReport(max_err, max_err < tol, checked, per_input=per_input)
