"""Minimal reverse-mode differentiation over dense numpy arrays.

Every op records its parents and a backward closure on the output tensor.
``backward`` linearizes the recorded graph into a tape (topological order)
and replays it once in reverse. There is no broadcasting beyond what each
op documents, and no graph fusion.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "relu",
    "silu",
    "tanh",
    "exp",
    "square",
    "absolute",
    "total",
    "sum_axes",
    "sqrt",
    "mean",
    "reshape",
    "concat",
    "take",
    "add_channel_bias",
    "add_channel_vector",
    "conv2d",
    "separable",
    "resample",
    "resample_matrix",
    "dct_matrix",
    "dct2",
    "idct2",
    "detach",
    "build_tape",
    "backward",
    "no_grad",
    "elementwise",
]


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared in a value or gradient."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._consumed = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd  # non-finite results are reported by _result
    return _result(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # relu'(0) = 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))  # overflow-free logistic
    out = x * sig
    return _result(out, (a,), lambda g: (g * (sig * (1.0 + x * (1.0 - sig))),), "silu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _result(x * x, (a,), lambda g: (g * 2 * x,), "square")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)  # |x|'(0) = 0
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "silu": silu,
    "tanh": tanh,
}


def elementwise(kind: str, *inputs, c: float | None = None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, relu, silu, tanh."""
    if kind == "scale":
        if c is None:
            raise ValueError("scale needs a scalar c")
        return scale(inputs[0], c)
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*inputs)


# --------------------------------------------------------------------------
# reductions and shape ops
# --------------------------------------------------------------------------


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(
        np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.full(shape, g, dtype=g.dtype),), "sum"
    )


def sum_axes(a: Tensor, axes: Sequence[int]) -> Tensor:
    """Sum over ``axes`` (dropped from the result)."""
    axes = tuple(ax % a.data.ndim for ax in axes)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    return _result(
        np.asarray(a.data.sum(axis=axes), dtype=a.dtype),
        (a,),
        lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),),
        "sum_axes",
    )


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _result(
        np.asarray(a.data.sum() / n, dtype=a.dtype),
        (a,),
        lambda g: (np.full(shape, g / n, dtype=g.dtype),),
        "mean",
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([p.data for p in parts], axis=axis),
        tuple(parts),
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def take(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) slicing; the backward scatters into zeros."""
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _result(np.ascontiguousarray(a.data[index]), (a,), bw, "take")


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., C, H, W] + b[C] broadcast over spatial (and batch) axes."""
    if x.data.ndim < 3 or b.shape != (x.shape[-3],):
        raise ValueError(f"bias shape {b.shape} incompatible with {x.shape}")
    bd = b.data.reshape(-1, 1, 1)
    sum_axes = tuple(i for i in range(x.data.ndim) if i != x.data.ndim - 3)
    return _result(x.data + bd, (x, b), lambda g: (g, g.sum(axis=sum_axes)), "add_bias")


add_channel_vector = add_channel_bias


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    # floor convention: a trailing partial window is dropped
    out = (n + 2 * pad - k) // stride + 1
    if out < 1:
        raise ValueError(f"conv2d: empty output for size {n}, kernel {k}, stride {stride}, pad {pad}")
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x[C_in,H,W] or x[N,C_in,H,W] with w[C_out,C_in,k,k]."""
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d: bad ranks x{x.shape} w{w.shape}")
    n, cin, h, wd = xd.shape
    cout, cin_w, k, k2 = w.shape
    if cin != cin_w or k != k2:
        raise ValueError(f"conv2d: weight {w.shape} incompatible with input {x.shape}")
    if k % 2 != 1:
        raise ValueError("conv2d: kernel size must be odd")
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(wd, k, stride, pad)
    # channel-last im2col: rows are output pixels, columns (ki, kj, c_in)
    xp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin), dtype=xd.dtype)
    xp[:, pad : pad + h, pad : pad + wd, :] = xd.transpose(0, 2, 3, 1)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * cin)
    wmat = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0)).reshape(k * k * cin, cout)
    out = cols @ wmat
    if b is not None:
        if b.shape != (cout,):
            raise ValueError(f"conv2d: bias shape {b.shape} != ({cout},)")
        out += b.data
    # NCHW view of channel-last storage; elementwise ops downstream keep this layout
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]
    pshape = xp.shape

    def bw(g):
        g4 = g[None] if squeeze else g
        gmat = np.ascontiguousarray(g4.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gw = (cols.T @ gmat).reshape(k, k, cin, cout).transpose(3, 2, 0, 1)
        gcols = (gmat @ wmat.T).reshape(n, ho, wo, k, k, cin)
        gxp = np.zeros(pshape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += gcols[
                    :, :, :, i, j
                ]
        gx = np.ascontiguousarray(gxp[:, pad : pad + h, pad : pad + wd].transpose(0, 3, 1, 2))
        if squeeze:
            gx = gx[0]
        grads = [gx, np.ascontiguousarray(gw)]
        if b is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, bw, "conv2d")


# --------------------------------------------------------------------------
# separable linear maps: resampling and the DCT
# --------------------------------------------------------------------------


def separable(x: Tensor, rows: np.ndarray, cols: np.ndarray, op: str = "separable") -> Tensor:
    """y = rows @ x @ cols.T over the last two axes."""
    if x.shape[-2] != rows.shape[1] or x.shape[-1] != cols.shape[1]:
        raise ValueError(f"{op}: matrices {rows.shape}/{cols.shape} do not fit input {x.shape}")
    rows = rows.astype(x.dtype, copy=False)
    cols = cols.astype(x.dtype, copy=False)
    out = rows @ x.data @ cols.T
    return _result(out, (x,), lambda g: (rows.T @ g @ cols,), op)


def resample_matrix(n: int, factor: int, mode: str) -> np.ndarray:
    """1-D resampling operator for one axis of length n."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if mode == "area_down":
        if n % factor:
            raise ValueError(f"area_down: size {n} not divisible by {factor}")
        m = np.zeros((n // factor, n))
        for i in range(n // factor):
            m[i, i * factor : (i + 1) * factor] = 1.0 / factor
        return m
    if mode == "nearest_up":
        m = np.zeros((n * factor, n))
        m[np.arange(n * factor), np.arange(n * factor) // factor] = 1.0
        return m
    if mode == "bilinear_up":
        # half-pixel centers, edge clamped
        out = n * factor
        m = np.zeros((out, n))
        for i in range(out):
            src = min(max((i + 0.5) / factor - 0.5, 0.0), n - 1.0)
            lo = int(math.floor(src))
            hi = min(lo + 1, n - 1)
            frac = src - lo
            m[i, lo] += 1.0 - frac
            m[i, hi] += frac
        return m
    raise ValueError(f"unknown resample mode {mode!r}")


def resample(x: Tensor, factor: int, mode: str) -> Tensor:
    h, w = x.shape[-2:]
    return separable(x, resample_matrix(h, factor, mode), resample_matrix(w, factor, mode), op=mode)


_DCT_CACHE: dict[int, np.ndarray] = {}


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis, rows are frequencies."""
    if n not in _DCT_CACHE:
        k = np.arange(n)[:, None]
        i = np.arange(n)[None, :]
        m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
        m[0] /= math.sqrt(2.0)
        m.setflags(write=False)
        _DCT_CACHE[n] = m
    return _DCT_CACHE[n]


def dct2(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    return separable(x, dct_matrix(h), dct_matrix(w), op="dct2")


def idct2(c: Tensor) -> Tensor:
    h, w = c.shape[-2:]
    return separable(c, dct_matrix(h).T, dct_matrix(w).T, op="idct2")


# --------------------------------------------------------------------------
# graph control
# --------------------------------------------------------------------------


def detach(x: Tensor) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = x.data.copy()
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out.op = "detach"
    out._consumed = False
    return out


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
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward already called on this loss")
    if not loss.requires_grad:
        raise RuntimeError("loss is detached from the tape (no input requires grad)")
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient at {node.op}")
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    loss._consumed = True
    # release the graph so interior buffers can be freed
    for node in tape:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
