"""Dense tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`. When at least one input
requires a gradient, the result remembers its parents and a closure that maps
the upstream gradient to gradients for those parents. :func:`backward` walks
the recorded nodes in reverse creation order, which is a valid reverse
topological order because a node is always created after its inputs.

Layout for sequence features is ``(batch, channel, time, joint)``.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Parameter", "GradTape", "ShapeError", "GeometryError",
    "ContractError", "NonFiniteError", "backward", "no_grad", "is_grad_enabled",
    "tensor", "matmul", "conv_temporal", "pointwise", "batch_norm", "BNState",
    "relu", "add", "sub", "mul", "neg", "sum", "mean", "reshape", "transpose",
    "concat", "l2_normalize", "masked_logsumexp", "linear", "exp", "log",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GeometryError(ValueError):
    """Convolution geometry leaves no valid output position."""


class ContractError(RuntimeError):
    """An operation was called outside its contract."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf was produced from finite inputs."""


_counter = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_counter)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a Python scalar")
        return mul(self, 1.0 / other)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self):
        backward(self)


def _raise_item(t):
    raise ContractError(f"item() needs a single element, got shape {t.shape}")


class Parameter(Tensor):
    """Trainable leaf with a gradient accumulator and a hierarchical name."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=np.float32):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        if self.grad is None or self.grad.shape != self.data.shape or self.grad.dtype != self.data.dtype:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad, dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(out: np.ndarray, parents: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    if not np.isfinite(out).all():
        if all(np.isfinite(p.data).all() for p in parents):
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t._seq = next(_counter)
    t.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = fn
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


class GradTape:
    """Ordered record of the operations reachable from a scalar loss.

    ``nodes`` lists every tensor that needs a gradient, most recent first;
    replaying it visits each operation only after all of its consumers.
    """

    def __init__(self, loss: Tensor):
        self.loss = loss
        seen: dict[int, Tensor] = {}
        stack = [loss]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen[id(node)] = node
            stack.extend(node._parents)
        self.nodes = sorted(seen.values(), key=lambda n: n._seq, reverse=True)

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is None]

    def backward(self) -> None:
        loss = self.loss
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ContractError("loss is not connected to any tensor that requires a gradient")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in self.nodes:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g.astype(node.data.dtype, copy=False)
                continue
            pgrads = node._backward(g)
            for parent, pg in zip(node._parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: Tensor) -> GradTape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    tape = GradTape(loss)
    tape.backward()
    return tape


# ---------------------------------------------------------------- elementwise

def _check_broadcast(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    if int(np.prod(a)) == 1 and len(a) <= len(b):
        return b
    if int(np.prod(b)) == 1 and len(b) <= len(a):
        return a
    try:
        out = np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a} and {b} do not broadcast") from None
    if out != a and out != b:
        raise ShapeError(f"{op}: shapes {a} and {b} would both expand")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _make(out, (x,), lambda g: (g * (out > 0),), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


# ----------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def fn(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), fn, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, fn, "concat")


# ----------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (B, in) and weight (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents: list[Tensor] = [x, weight]
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def fn(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, fn, "linear")


def pointwise(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution: mixes channels of a (B, C, T, N) tensor; weight is (C_out, C_in)."""
    if x.ndim != 4 or weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"pointwise: input {x.shape} does not match weight {weight.shape}")
    B, C, T, N = x.shape
    O = weight.shape[0]
    xf = x.data.reshape(B, C, T * N)
    wd = weight.data
    out = np.matmul(wd, xf)
    if bias is not None:
        out += bias.data[None, :, None]
    parents: list[Tensor] = [x, weight] + ([bias] if bias is not None else [])

    def fn(g):
        gf = g.reshape(B, O, T * N)
        gx = np.matmul(wd.T, gf).reshape(B, C, T, N)
        gw = np.einsum("bot,bct->oc", gf, xf, optimize=True)
        grads = [gx, gw]
        if bias is not None:
            grads.append(gf.sum(axis=(0, 2)))
        return tuple(grads)

    return _make(out.reshape(B, O, T, N), parents, fn, "pointwise")


def conv_temporal(x: Tensor, w: Tensor, stride: int = 1, pad: int | None = None,
                  bias: Tensor | None = None) -> Tensor:
    """Convolution along the time axis only; joints are processed independently.

    ``x`` is (C_in, T, N) or (B, C_in, T, N), ``w`` is (C_out, C_in, K, 1).
    With ``pad=None`` the padding is (K - 1) // 2.
    """
    unbatched = x.ndim == 3
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or w.ndim != 4 or w.shape[3] != 1 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv_temporal: input {x.shape} does not match kernel {w.shape}")
    B, C, T, N = x.shape
    O, _, K, _ = w.shape
    if pad is None:
        pad = (K - 1) // 2
    if stride < 1 or T + 2 * pad < K:
        raise GeometryError(f"conv_temporal: T={T} with pad={pad} is shorter than kernel K={K}")
    T_out = (T + 2 * pad - K) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (0, 0))) if pad else x.data
    # cols: (B, C, K, T_out, N)
    sB, sC, sT, sN = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, shape=(B, C, K, T_out, N), strides=(sB, sC, sT, sT * stride, sN), writeable=False)
    wf = w.data.reshape(O, C * K)
    colsf = np.ascontiguousarray(cols).reshape(B, C * K, T_out * N)
    out = np.matmul(wf, colsf)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(B, O, T_out, N)
    parents: list[Tensor] = [x, w] + ([bias] if bias is not None else [])
    dtype = x.dtype

    def fn(g):
        gf = g.reshape(B, O, T_out * N)
        gw = np.einsum("bol,bkl->ok", gf, colsf, optimize=True).reshape(w.shape)
        gcols = np.matmul(wf.T, gf).reshape(B, C, K, T_out, N)
        gxp = np.zeros((B, C, T + 2 * pad, N), dtype=dtype)
        stop = (T_out - 1) * stride + 1
        for k in range(K):
            gxp[:, :, k:k + stop:stride, :] += gcols[:, :, k]
        gx = gxp[:, :, pad:pad + T, :] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(gf.sum(axis=(0, 2)))
        return tuple(grads)

    res = _make(out, parents, fn, "conv_temporal")
    return reshape(res, res.shape[1:]) if unbatched else res


# ----------------------------------------------------------------- normalization

class BNState:
    """Running statistics of a batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float32, momentum: float = BN_MOMENTUM,
                 eps: float = BN_EPS):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        # cumulative averaging when momentum is None (used for SWA recalibration)
        self.num_batches = 0

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]

    def reset(self):
        self.running_mean[:] = 0
        self.running_var[:] = 1
        self.num_batches = 0


def batch_norm(x: Tensor, state: BNState, weight: Tensor, bias: Tensor,
               training: bool) -> Tensor:
    """Per-channel normalization of a (B, C, ...) tensor over every other axis."""
    if x.ndim < 2 or x.shape[1] != state.channels:
        raise ShapeError(f"batch_norm: input {x.shape} does not match {state.channels} channels")
    C = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    xd = x.data
    gamma = weight.data.reshape(bshape)
    beta = bias.data.reshape(bshape)
    if training:
        n = xd.size // C
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        _update_running(state, mu, var, n)
    else:
        mu = state.running_mean
        var = state.running_var
    inv = (1.0 / np.sqrt(var + state.eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape).astype(xd.dtype)) * inv.reshape(bshape)
    out = xhat * gamma + beta

    def fn(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        if training:
            n = xd.size // C
            gx = (gamma * inv.reshape(bshape) / n) * (
                n * g - gb.reshape(bshape) - xhat * gg.reshape(bshape))
        else:
            gx = g * (gamma * inv.reshape(bshape))
        return gx, gg, gb

    return _make(out, (x, weight, bias), fn, "batch_norm")


def _update_running(state: BNState, mu, var, n):
    unbiased = var * (n / max(n - 1, 1))
    dt = state.running_mean.dtype
    if state.momentum is None:
        k = state.num_batches
        state.running_mean[:] = (state.running_mean * k + mu.astype(dt)) / (k + 1)
        state.running_var[:] = (state.running_var * k + unbiased.astype(dt)) / (k + 1)
    else:
        m = state.momentum
        state.running_mean[:] = (1 - m) * state.running_mean + m * mu.astype(dt)
        state.running_var[:] = (1 - m) * state.running_var + m * unbiased.astype(dt)
    state.num_batches += 1


def l2_normalize(x: Tensor, axis: int = 1, eps: float = 1e-12) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    y = xd / norm

    def fn(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make(y, (x,), fn, "l2_normalize")


def masked_logsumexp(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Stable log-sum-exp over the entries of ``x`` where ``mask`` is true.

    Rows with an empty mask are returned as 0 with zero gradient; callers are
    expected to exclude them.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"masked_logsumexp: mask {mask.shape} does not match {x.shape}")
    xd = x.data
    filled = np.where(mask, xd, -np.inf)
    m = filled.max(axis=axis, keepdims=True)
    empty = ~mask.any(axis=axis, keepdims=True)
    m = np.where(empty, 0.0, m)
    e = np.exp(np.where(mask, xd - m, -np.inf))
    s = e.sum(axis=axis, keepdims=True)
    s_safe = np.where(empty, 1.0, s)
    out = (np.log(s_safe) + m).astype(xd.dtype)
    p = e / s_safe

    def fn(g):
        return ((np.expand_dims(g, axis) * p).astype(xd.dtype),)

    return _make(np.squeeze(out, axis=axis), (x,), fn, "masked_logsumexp")


def parameters_finite(params: Iterable[Parameter]) -> str | None:
    """Name of the first parameter with a non-finite gradient, if any."""
    for p in params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            return p.name
    return None
