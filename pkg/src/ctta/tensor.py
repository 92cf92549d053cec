"""Dense float32 tensors with reverse-mode automatic differentiation.

Every differentiable op returns a new :class:`Tensor` that remembers its parents
and a closure mapping the output gradient to parent gradients. Calling
:func:`backward` on a scalar walks that graph in reverse topological order,
accumulates ``.grad`` on leaf tensors, and then drops the graph.

Broadcasting is deliberately limited to exact shape matches and scalars. The
few places that need per-channel broadcasting (linear bias, batch norm) are
fused ops with their own backward rules.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

DTYPE = np.float32

_state = threading.local()


@contextlib.contextmanager
def compute_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with.

    Intended for reference evaluations (e.g. float64 finite-difference
    oracles); the library itself always runs in float32.
    """
    global DTYPE
    prev = DTYPE
    DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = prev


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None) -> Tensor:
        return sum_(self, axis)

    def mean(self) -> Tensor:
        return mean(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _check_operand(op: str, a: Tensor, b) -> tuple[Tensor | None, np.ndarray]:
    """Return (tensor-or-None, array) for the right operand of a binary op."""
    if isinstance(b, Tensor):
        if b.data.shape != a.data.shape and b.data.size != 1:
            raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        return b, b.data
    arr = np.asarray(b, dtype=DTYPE)
    if arr.shape != a.data.shape and arr.size != 1:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {arr.shape}")
    return None, arr


def _reduce_to(grad: np.ndarray, like: np.ndarray) -> np.ndarray:
    if grad.shape == like.shape:
        return grad
    return np.asarray(grad.sum(), dtype=DTYPE).reshape(like.shape)


def add(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    bt, bd = _check_operand("add", a, b)
    parents = (a,) if bt is None else (a, bt)

    def backward(g):
        return (g,) if bt is None else (g, _reduce_to(g, bd))

    return _result(a.data + bd, parents, backward, "add")


def sub(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    bt, bd = _check_operand("sub", a, b)
    parents = (a,) if bt is None else (a, bt)

    def backward(g):
        return (g,) if bt is None else (g, _reduce_to(-g, bd))

    return _result(a.data - bd, parents, backward, "sub")


def mul(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    bt, bd = _check_operand("mul", a, b)
    ad = a.data
    parents = (a,) if bt is None else (a, bt)

    def backward(g):
        ga = g * bd
        if bt is None:
            return (ga,)
        return (ga, _reduce_to(g * ad, bd))

    return _result(ad * bd, parents, backward, "mul")


def div(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    bt, bd = _check_operand("div", a, b)
    ad = a.data
    parents = (a,) if bt is None else (a, bt)

    def backward(g):
        ga = g / bd
        if bt is None:
            return (ga,)
        return (ga, _reduce_to(-g * ad / (bd * bd), bd))

    return _result(ad / bd, parents, backward, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, DTYPE(0))
    return _result(out, (a,), lambda g: (g * (out > 0),), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.data.shape
    if axis is None:
        out = np.asarray(a.data.sum(dtype=DTYPE), dtype=DTYPE)
        return _result(out, (a,), lambda g: (np.broadcast_to(g, shape).astype(DTYPE),), "sum")
    out = a.data.sum(axis=axis, dtype=DTYPE)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).astype(DTYPE),)

    return _result(out, (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return mul(sum_(a), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.data.shape
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    if x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
        parents: tuple[Tensor, ...] = (x, weight, bias)
    else:
        parents = (x, weight)

    def backward(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _result(out, parents, backward, "linear")


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a B x C x H x W input with an O x C x kh x kw kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ShapeError(f"conv2d kernel {kernel.shape} larger than padded input {x.shape} (padding={padding})")
    s = stride
    Ho = conv_output_size(H, kh, s, padding)
    Wo = conv_output_size(W, kw, s, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
    # (B, C, kh, kw, Ho, Wo) patches so each image is a (C*kh*kw, Ho*Wo) matrix
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * kh * kw, Ho * Wo)
    wmat = kernel.data.reshape(O, C * kh * kw)
    out = np.matmul(wmat, cols).reshape(B, O, Ho, Wo)
    xshape = xp.shape

    def backward(g):
        gflat = g.reshape(B, O, Ho * Wo)
        gw = np.einsum("bop,bkp->ok", gflat, cols, optimize=True).astype(DTYPE).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gflat).reshape(B, C, kh, kw, Ho, Wo)
            gxp = np.zeros(xshape, dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += gcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return gx, gw

    return _result(out, (x, kernel), backward, "conv2d")


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ShapeError(f"avg_pool2d: spatial dims {H}x{W} not divisible by {k}")
    xd = x.data
    out = np.zeros((B, C, H // k, W // k), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            out += xd[:, :, i::k, j::k]
    out *= DTYPE(1.0 / (k * k))

    def backward(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / DTYPE(k * k)
        return (gx.astype(DTYPE),)

    return _result(out, (x,), backward, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    out = (x.data.reshape(B, C, H * W).sum(axis=2, dtype=DTYPE) / DTYPE(H * W)).astype(DTYPE)

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / DTYPE(H * W), x.shape).astype(DTYPE),)

    return _result(out, (x,), backward, "global_avg_pool")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def _group_channel_sum(xd: np.ndarray) -> np.ndarray:
    """Sum of a (G, B, C, ...) array over everything but G and C; reduces the contiguous tail first."""
    G, B, C = xd.shape[:3]
    return xd.reshape(G, B, C, -1).sum(axis=3, dtype=DTYPE).sum(axis=1, dtype=DTYPE).astype(DTYPE)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mean_: np.ndarray | None = None,
    var: np.ndarray | None = None,
    eps: float = 1e-5,
    groups: int = 1,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-channel normalization over every axis except 1.

    With ``mean_``/``var`` given they are treated as constants (running
    statistics); otherwise the biased batch statistics are used and
    differentiated through. ``groups > 1`` splits the batch into that many
    contiguous equal chunks, each normalized with its own statistics.
    Returns ``(y, batch_mean, batch_var)``; with groups the statistics have a
    leading group axis.
    """
    if x.data.ndim not in (2, 4):
        raise ShapeError(f"batch_norm expects (B,C) or (B,C,H,W), got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm affine shape {gamma.shape} does not match {C} channels")
    if groups < 1 or x.shape[0] % groups:
        raise ShapeError(f"batch of {x.shape[0]} cannot be split into {groups} groups")
    use_batch = mean_ is None
    # work on a (G, B/G, C, ...) view so group statistics reduce over axes 1, 3, 4
    xd = x.data.reshape((groups, x.shape[0] // groups) + x.shape[1:])
    axes = (1,) if x.data.ndim == 2 else (1, 3, 4)
    bshape = (1, 1, C) if x.data.ndim == 2 else (1, 1, C, 1, 1)
    sshape = (groups, 1, C) if x.data.ndim == 2 else (groups, 1, C, 1, 1)
    n = xd.size // (C * groups)
    if use_batch:
        mu = _group_channel_sum(xd) / DTYPE(n)
        d = xd - mu.reshape(sshape)
        v = _group_channel_sum(d * d) / DTYPE(n)
        mu_b, v_b = mu.reshape(sshape), v.reshape(sshape)
    else:
        mu = np.asarray(mean_, dtype=DTYPE)
        v = np.asarray(var, dtype=DTYPE)
        mu_b, v_b = mu.reshape(bshape), v.reshape(bshape)
    inv_std = (1.0 / np.sqrt(v_b + DTYPE(eps))).astype(DTYPE)
    xhat = (xd - mu_b) * inv_std
    gd = gamma.data.reshape(bshape)
    out = (xhat * gd + beta.data.reshape(bshape)).reshape(x.shape)
    red = (0,) + axes

    def backward(g):
        g = g.reshape(xd.shape)
        gbeta = g.sum(axis=red)
        ggamma = (g * xhat).sum(axis=red)
        dxhat = g * gd
        if use_batch:
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = (inv_std / DTYPE(n)) * (DTYPE(n) * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv_std
        return gx.astype(DTYPE).reshape(x.shape), ggamma, gbeta

    y = _result(out.astype(DTYPE), (x, gamma, beta), backward, "batch_norm")
    if groups == 1 and use_batch:
        mu, v = mu[0], v[0]
    return y, mu, v


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(DTYPE)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return (z - np.log(np.exp(z).sum(axis=-1, keepdims=True))).astype(DTYPE)


def softmax(logits: Tensor) -> Tensor:
    if logits.data.ndim != 2 or logits.shape[1] < 1:
        raise ShapeError(f"softmax expects (B, C) with C >= 1, got {logits.shape}")
    s = softmax_np(logits.data)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result(s, (logits,), backward, "softmax")


def log_softmax(logits: Tensor) -> Tensor:
    if logits.data.ndim != 2 or logits.shape[1] < 1:
        raise ShapeError(f"log_softmax expects (B, C) with C >= 1, got {logits.shape}")
    out = log_softmax_np(logits.data)
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return _result(out, (logits,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    """Populate ``.grad`` on every leaf that requires grad, then free the graph."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not attached to any tensor that requires grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.astype(DTYPE) if node.grad is None else (node.grad + g).astype(DTYPE)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=DTYPE)
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
