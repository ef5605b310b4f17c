"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.  Calling
:func:`backward` on a scalar orders the recorded graph topologically (the
"tape"), replays the closures in reverse and accumulates gradients into the
leaves.  The tape is released afterwards, so a second ``backward`` through the
same graph raises.

Arrays may carry any number of leading batch dimensions; the documented shapes
refer to the trailing axes.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_released")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._released = False

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite values produced by {op}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._released = False
        out._op = op
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basics -----------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._released

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op})"

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def build_tape(loss: Tensor) -> list[Tensor]:
    """Nodes reachable from ``loss`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tracked leaf reachable from scalar ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise RuntimeError("the tape behind this loss was already consumed by backward()")
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is None:
                g = np.zeros_like(node.data)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            g = np.zeros_like(node.data)
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in tape:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._released = True


# ---------------------------------------------------------------------------
# Elementary operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return Tensor._result(out, (a, b), bw, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return Tensor._result(out, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "linear": lambda t: t}


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return Tensor._result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.array(out, dtype=np.float64), (a,), bw, "getitem")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._result(out, tensors, bw, "stack")


def _contract(a_sub: str, b_sub: str, out_sub: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Two-operand einsum as one batched matmul.

    Indices shared by both operands and the output are batch axes, indices
    shared only by the operands are contracted, the rest are free.
    """
    batch = [c for c in out_sub if c in a_sub and c in b_sub]
    contr = [c for c in a_sub if c in b_sub and c not in out_sub]
    a_free = [c for c in out_sub if c in a_sub and c not in b_sub]
    b_free = [c for c in out_sub if c in b_sub and c not in a_sub]
    dims = {**dict(zip(a_sub, a.shape)), **dict(zip(b_sub, b.shape))}
    for c in set(a_sub) & set(b_sub):
        if a.shape[a_sub.index(c)] != b.shape[b_sub.index(c)]:
            raise ShapeError(f"index {c!r} has extent {a.shape[a_sub.index(c)]} vs {b.shape[b_sub.index(c)]}")
    size = lambda idx: int(np.prod([dims[c] for c in idx], dtype=np.int64))  # noqa: E731
    am = a.transpose([a_sub.index(c) for c in batch + a_free + contr]).reshape(size(batch), size(a_free), size(contr))
    bm = b.transpose([b_sub.index(c) for c in batch + contr + b_free]).reshape(size(batch), size(contr), size(b_free))
    out = np.matmul(am, bm).reshape([dims[c] for c in batch + a_free + b_free])
    order = batch + a_free + b_free
    return out.transpose([order.index(c) for c in out_sub])


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum with explicit output, e.g. ``"tnm,nkmg->tnkg"``.

    Every index of an operand must appear in the other operand or the output,
    and no index may repeat within one term.
    """
    a, b = as_tensor(a), as_tensor(b)
    inputs, out_sub = subscripts.replace(" ", "").split("->")
    a_sub, b_sub = inputs.split(",")
    for own, other in ((a_sub, b_sub), (b_sub, a_sub)):
        if len(set(own)) != len(own) or any(c not in other and c not in out_sub for c in own):
            raise ShapeError(f"unsupported einsum pattern {subscripts!r}")
    if len(set(out_sub)) != len(out_sub) or any(c not in a_sub + b_sub for c in out_sub):
        raise ShapeError(f"unsupported einsum pattern {subscripts!r}")
    if len(a_sub) != a.ndim or len(b_sub) != b.ndim:
        raise ShapeError(f"einsum {subscripts!r} does not fit shapes {a.shape}, {b.shape}")
    out = _contract(a_sub, b_sub, out_sub, a.data, b.data)

    def bw(g):
        ga = _contract(out_sub, b_sub, a_sub, g, b.data)
        gb = _contract(out_sub, a_sub, b_sub, g, a.data)
        return ga, gb

    return Tensor._result(np.ascontiguousarray(out, dtype=np.float64), (a, b), bw, "einsum")


# ---------------------------------------------------------------------------
# Network operations
# ---------------------------------------------------------------------------

IM2COL_LIMIT = 1 << 24  # patch-matrix elements; larger inputs loop over kernel offsets


def same_padding(k: int) -> tuple[int, int]:
    before = (k - 1) // 2
    return before, k - 1 - before


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 "same" convolution over the (T, F) axes.

    ``x`` is ``(..., T, F, Cin)`` and ``kernels`` is ``(k1, k2, Cin, Cout)``.
    Padding is ``floor((k-1)/2)`` zeros before and ``ceil((k-1)/2)`` after.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.ndim < 3 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects input (..., T, F, Cin) and kernels (k1, k2, Cin, Cout); got {x.shape}, {kernels.shape}")
    k1, k2, cin, cout = kernels.shape
    *lead, T, F, c = x.shape
    if c != cin:
        raise ShapeError(f"conv2d input has {c} channels but kernels expect {cin}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
    xb = x.data.reshape(-1, T, F, cin)
    (t0, t1), (f0, f1) = same_padding(k1), same_padding(k2)
    xp = np.pad(xb, ((0, 0), (t0, t1), (f0, f1), (0, 0)))
    w = kernels.data
    n_rows = xb.shape[0] * T * F
    if n_rows * k1 * k2 * cin <= IM2COL_LIMIT:
        # patch matrix rows are (k1, k2, cin)-ordered to match the kernel layout
        windows = np.lib.stride_tricks.sliding_window_view(xp, (k1, k2), axis=(1, 2))
        patches = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n_rows, k1 * k2 * cin)
        w_mat = w.reshape(k1 * k2 * cin, cout)
        out = (patches @ w_mat).reshape(xb.shape[0], T, F, cout)
    else:
        patches = None
        out = np.zeros((xb.shape[0], T, F, cout))
        for i in range(k1):
            for j in range(k2):
                out += np.tensordot(xp[:, i:i + T, j:j + F, :], w[i, j], axes=([3], [0]))
    if bias is not None:
        out += bias.data

    def bw(g):
        g = g.reshape(-1, T, F, cout)
        g2 = g.reshape(-1, cout)
        gxp = np.zeros_like(xp)
        if patches is not None:
            gw = (patches.T @ g2).reshape(w.shape)
            gpatch = (g2 @ w_mat.T).reshape(xb.shape[0], T, F, k1, k2, cin)
            for i in range(k1):
                for j in range(k2):
                    gxp[:, i:i + T, j:j + F, :] += gpatch[:, :, :, i, j, :]
        else:
            gw = np.zeros_like(w)
            for i in range(k1):
                for j in range(k2):
                    patch = xp[:, i:i + T, j:j + F, :].reshape(-1, cin)
                    gw[i, j] = patch.T @ g2
                    gxp[:, i:i + T, j:j + F, :] += g @ w[i, j].T
        gx = gxp[:, t0:t0 + T, f0:f0 + F, :].reshape(x.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return Tensor._result(out.reshape(*lead, T, F, cout), parents, bw, "conv2d")


def max_pool_freq(x: Tensor, pool: int) -> Tensor:
    """Non-overlapping max pooling along the frequency axis of ``(..., T, F, Q)``.

    Trailing bins that do not fill a whole pool are dropped.  The gradient goes
    to the first maximal element of each pool.
    """
    x = as_tensor(x)
    if pool < 1:
        raise ShapeError(f"pool size must be >= 1, got {pool}")
    *lead, T, F, Q = x.shape
    if pool > F:
        raise ShapeError(f"pool size {pool} exceeds frequency extent {F}")
    fo = F // pool
    view = x.data[..., : fo * pool, :].reshape(*lead, T, fo, pool, Q)
    idx = np.argmax(view, axis=-2)
    out = np.take_along_axis(view, idx[..., None, :], axis=-2)[..., 0, :]

    def bw(g):
        onehot = np.arange(pool)[:, None] == idx[..., None, :]
        gview = onehot * g[..., None, :]
        full = np.zeros_like(x.data)
        full[..., : fo * pool, :] = gview.reshape(*lead, T, fo * pool, Q)
        return (full,)

    return Tensor._result(out, (x,), bw, "max_pool_freq")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight + bias``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"dense: input (..., {x.shape[-1]}) incompatible with weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"dense bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias.data

    def bw(g):
        gx = g @ weight.data.T
        gw = x.data.reshape(-1, weight.shape[0]).T @ g.reshape(-1, weight.shape[1])
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, weight.shape[1]).sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, bw, "dense")


def softmax_axis(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), bw, "softmax")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` at training time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout at training time needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


def l2_penalty(params: Iterable[Tensor], lam: float) -> Tensor:
    total: Tensor = Tensor(0.0)
    for p in params:
        total = total + tsum(mul(p, p))
    return total * lam


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """Capsule squashing ``v = |s|^2/(1+|s|^2) * s/|s|``.

    Evaluated as ``s * |s| / (1 + |s|^2)``, which is exact at ``s = 0``; the
    gradient there is the limit value (the identity scaled by zero).
    """
    s = as_tensor(s)
    q = np.sum(s.data * s.data, axis=axis, keepdims=True)
    n = np.sqrt(q)
    f = n / (1.0 + q)
    out = s.data * f

    def bw(g):
        safe_n = np.where(n > 0, n, 1.0)
        # d f / d q, times 2 for d q / d s
        dfq2 = np.where(n > 0, (1.0 - q) / (safe_n * (1.0 + q) ** 2), 0.0)
        sg = np.sum(s.data * g, axis=axis, keepdims=True)
        return (f * g + dfq2 * sg * s.data,)

    return Tensor._result(out, (s,), bw, "squash")


def norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the origin is taken as zero."""
    x = as_tensor(x)
    out = np.sqrt(np.sum(x.data * x.data, axis=axis))

    def bw(g):
        n = np.expand_dims(out, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, x.data / safe, 0.0) * np.expand_dims(g, axis),)

    return Tensor._result(out, (x,), bw, "norm")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy of ``sigmoid(logits)`` against ``targets``."""
    z = logits.data
    y = np.asarray(targets, dtype=np.float64)
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def bw(g):
        return (g * (_sigmoid(z) - y),)

    return Tensor._result(out, (logits,), bw, "bce_with_logits")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-3,
) -> Tensor:
    """Per-channel (last axis) batch normalization.

    Training normalizes with batch statistics and updates the running averages
    in place; inference uses the running averages.
    """
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = tmean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = tmean(centered * centered, axis=axes, keepdims=True)
        xhat = centered / sqrt(var + eps)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu.data.reshape(-1)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.data.reshape(-1)
    else:
        xhat = (x - running_mean) * (1.0 / np.sqrt(running_var + eps))
    return xhat * gamma + beta


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def numerical_gradient(f: Callable[[], float], array: np.ndarray, h: float = 1e-5,
                       indices: Iterable[tuple] | None = None) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. ``array`` (modified in place)."""
    grad = np.zeros_like(array)
    it = indices if indices is not None else np.ndindex(array.shape)
    for idx in it:
        old = array[idx]
        array[idx] = old + h
        fp = f()
        array[idx] = old - h
        fm = f()
        array[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))
