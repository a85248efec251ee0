"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is dynamic: each operation attaches a small context to its output
recording the parent tensors and a closure that maps the output gradient to
parent gradients. ``Tensor.backward`` walks that graph once in reverse
topological order, accumulates gradients into every tensor that requires
them, then clears the contexts so a second backward on the same graph raises
instead of silently reusing stale state.

All data lives in row-major ``numpy.float64`` arrays. Broadcasting follows
numpy rules; gradients of broadcast operands are summed back to the operand
shape.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

from .errors import ContractError, DimensionError, DomainError, StaleGraphError

_node_counter = itertools.count()

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that suppresses graph construction (inference mode)."""

    def __enter__(self):
        self.prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self.prev
        return False


class _Ctx:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op, parents, backward):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    """A dense float64 array plus an optional gradient slot and graph link."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_ctx", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_counter)
        self._ctx = None
        self._consumed = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A graph-free view of the same values."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph machinery -----------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor that requires it.

        Only valid on scalars. Intermediate gradients are dropped and the
        graph is cleared afterwards; leaves keep their accumulated ``grad``.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        if self._consumed:
            raise StaleGraphError(
                "backward was already run on this graph; rebuild the forward pass"
            )
        topo = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            ctx = node._ctx
            if ctx is None or node.grad is None:
                continue
            grads = ctx.backward(node.grad)
            for parent, g in zip(ctx.parents, grads):
                if g is None:
                    continue
                if parent.requires_grad or parent._ctx is not None:
                    # Accumulation rebinds rather than mutates, so views are safe.
                    parent.grad = g if parent.grad is None else parent.grad + g
        # Clear the graph: keep leaf grads, drop intermediate state.
        for node in topo:
            if node._ctx is not None:
                node._ctx = None
                node.grad = None
                node._consumed = True

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose2d(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _toposort(root: Tensor):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
    return order


def _make(data, op, parents, backward):
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad or p._ctx is not None for p in parents):
        out.requires_grad = True
        out._ctx = _Ctx(op, parents, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting introduced."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# -- elementwise primitives ----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    return _make(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    return _make(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    return _make(
        a.data * b.data,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)
    if np.any(b.data == 0.0):
        raise DomainError("div: denominator contains zero")
    inv = 1.0 / b.data
    return _make(
        a.data * inv,
        "div",
        (a, b),
        lambda g: (
            _unbroadcast(g * inv, a.shape),
            _unbroadcast(-g * a.data * inv * inv, b.shape),
        ),
    )


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, "scalar-mul", (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError(f"log: input has non-positive entries (min {a.data.min()})")
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise DomainError(f"sqrt: input has negative entries (min {a.data.min()})")
    out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed stably for large |x|."""
    out = np.logaddexp(0.0, a.data)
    sig = _sigmoid(a.data)
    return _make(out, "softplus", (a,), lambda g: (g * sig,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    pos = x >= 0
    out = np.empty_like(x)
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; the gradient is zero outside the interval."""
    if lo > hi:
        raise DomainError(f"clamp: empty interval [{lo}, {hi}]")
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), "clamp", (a,), lambda g: (g * mask,))


def softmax(a: Tensor) -> Tensor:
    """Rowwise softmax of a 2-D tensor, stabilised by max subtraction."""
    if a.ndim != 2:
        raise DimensionError(f"softmax: expected a 2-D tensor, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, "softmax", (a,), backward)


# -- reductions and reshaping ---------------------------------------------------


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        ge = np.expand_dims(g, axis)
        return (np.broadcast_to(ge, a.shape).copy(),)

    return _make(out, "sum", (a,), backward)


def tensor_mean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        ge = np.expand_dims(g / count, axis)
        return (np.broadcast_to(ge, a.shape).copy(),)

    return _make(out, "mean", (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(
        a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),)
    )


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a 2-D tensor, got shape {a.shape}")
    return _make(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: empty tensor list")
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(
            i != axis and other[i] != ref[i] for i in range(len(ref))
        ):
            raise DimensionError(
                f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}"
            )
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, "concat", tuple(tensors), backward)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows a[idx]; the gradient scatter-adds back into place."""
    idx = np.asarray(idx, dtype=np.intp)
    if a.ndim != 2:
        raise DimensionError(f"gather-rows: expected a 2-D tensor, got shape {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError(
            f"gather-rows: index out of range for {a.shape[0]} rows"
        )

    def backward(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return (da,)

    return _make(a.data[idx], "gather-rows", (a,), backward)


def l2norm_rows(a: Tensor) -> Tensor:
    """Rowwise Euclidean norms of a 2-D tensor, shape (B, 1). Rows must be nonzero."""
    if a.ndim != 2:
        raise DimensionError(f"l2norm: expected a 2-D tensor, got shape {a.shape}")
    norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise DomainError("l2norm: zero-norm row")
    return _make(norms, "l2norm", (a,), lambda g: (g * a.data / norms,))


# -- linear algebra and convolution ----------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(
        a.data @ b.data,
        "matmul",
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def conv2d(x: Tensor, w: Tensor, padding: str = "valid") -> Tensor:
    """2-D convolution, stride 1. x is (B,C,H,W), w is (OC,C,kh,kw).

    padding "same" keeps the spatial size (odd kernels only), "valid" shrinks
    it by k-1. Realised through im2col so forward and backward are two
    matmuls plus a fold.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(
            f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}"
        )
    B, C, H, W = x.shape
    OC, CK, kh, kw = w.shape
    if CK != C:
        raise DimensionError(
            f"conv2d: kernel expects {CK} channels, input has {C} ({x.shape} vs {w.shape})"
        )
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise DimensionError("conv2d: 'same' padding needs odd kernel sizes")
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise DimensionError(f"conv2d: unknown padding {padding!r}")
    if H + 2 * ph < kh or W + 2 * pw < kw:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * ph}x{W + 2 * pw}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    OH, OW = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B * OH * OW, C * kh * kw
    )
    wmat = w.data.reshape(OC, C * kh * kw)
    out = np.ascontiguousarray(
        (cols @ wmat.T).reshape(B, OH, OW, OC).transpose(0, 3, 1, 2)
    )

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * OH * OW, OC)
        dw = (gmat.T @ cols).reshape(OC, C, kh, kw)
        dcols = (gmat @ wmat).reshape(B, OH, OW, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                dxp[:, :, ki : ki + OH, kj : kj + OW] += dcols[:, :, ki, kj]
        dx = dxp[:, :, ph : ph + H, pw : pw + W] if ph or pw else dxp
        return (dx, dw)

    return _make(out, "conv2d", (x, w), backward)


def _pool_windows(x: Tensor, size: int, stride: int, op: str):
    if x.ndim != 4:
        raise DimensionError(f"{op}: expected a 4-D tensor, got shape {x.shape}")
    B, C, H, W = x.shape
    if H < size or W < size:
        raise DimensionError(f"{op}: window {size} larger than input {H}x{W}")
    if (H - size) % stride or (W - size) % stride:
        raise DimensionError(
            f"{op}: input {H}x{W} not tiled by window {size} stride {stride}"
        )
    OH = (H - size) // stride + 1
    OW = (W - size) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (size, size), axis=(2, 3))
    return windows[:, :, ::stride, ::stride], OH, OW


def maxpool2d(x: Tensor, size: int = 2, stride: int | None = None) -> Tensor:
    stride = size if stride is None else stride
    windows, OH, OW = _pool_windows(x, size, stride, "maxpool2d")
    B, C = x.shape[:2]
    flat = windows.reshape(B, C, OH, OW, size * size)
    idx = flat.argmax(axis=-1)  # ties resolve to the first maximum
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros_like(x.data)
        for off in range(size * size):
            ki, kj = divmod(off, size)
            contrib = g * (idx == off)
            dx[:, :, ki : ki + OH * stride : stride, kj : kj + OW * stride : stride] += contrib
        return (dx,)

    return _make(out, "maxpool2d", (x,), backward)


def avgpool2d(x: Tensor, size: int = 2, stride: int | None = None) -> Tensor:
    stride = size if stride is None else stride
    windows, OH, OW = _pool_windows(x, size, stride, "avgpool2d")
    out = windows.mean(axis=(-2, -1))
    scale = 1.0 / (size * size)

    def backward(g):
        dx = np.zeros_like(x.data)
        gs = g * scale
        for ki in range(size):
            for kj in range(size):
                dx[:, :, ki : ki + OH * stride : stride, kj : kj + OW * stride : stride] += gs
        return (dx,)

    return _make(out, "avgpool2d", (x,), backward)


# -- uniform dispatch -------------------------------------------------------------

_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "mul-elementwise": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "maxpool2d": maxpool2d,
    "avgpool2d": avgpool2d,
    "relu": relu,
    "softmax": softmax,
    "softplus": softplus,
    "log": log,
    "exp": exp,
    "sqrt": sqrt,
    "sum": tensor_sum,
    "mean": tensor_mean,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "l2norm": l2norm_rows,
    "l2-norm": l2norm_rows,
    "scalar-mul": scalar_mul,
    "clamp": clamp,
}


def apply_primitive(kind: str, inputs, attrs: dict | None = None) -> Tensor:
    """Apply a named primitive to a list of tensors.

    All primitives are pure: the inputs are never mutated and identical
    inputs give bit-identical outputs.
    """
    fn = _PRIMITIVES.get(kind)
    if fn is None:
        raise ValueError(f"unknown primitive {kind!r}")
    return fn(*inputs, **(attrs or {}))


# -- finite-difference verification -------------------------------------------------


def gradient_check(build, point: Tensor, eps: float = 1e-5) -> float:
    """Compare analytic gradients of ``build(point)`` with central differences.

    ``build`` must be a deterministic scalar-loss constructor that reads
    ``point.data`` at call time. Returns the maximum over coordinates of
    |analytic - numeric| / max(1, |analytic|).
    """
    if not (0.0 < eps <= 1e-3):
        raise ContractError(f"gradient_check: eps must be in (0, 1e-3], got {eps}")
    first = build(point).data.copy()
    second = build(point).data.copy()
    if not np.array_equal(first, second):
        raise ContractError("gradient_check: loss constructor is not deterministic")

    point.grad = None
    loss = build(point)
    loss.backward()
    analytic = (
        np.zeros_like(point.data) if point.grad is None else point.grad.copy()
    )

    flat = point.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(build(point).data)
        flat[i] = orig - eps
        f_minus = float(build(point).data)
        flat[i] = orig
        numeric[i] = (f_plus - f_minus) / (2.0 * eps)

    a = analytic.reshape(-1)
    err = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
    point.grad = None
    return float(err.max()) if err.size else 0.0
