"""Dense N-dimensional tensors with reverse-mode automatic differentiation.

numpy-backed tape autodiff: every operation records its parents and a
per-parent gradient closure; ``Tensor.backward()`` walks the graph in
reverse topological order and accumulates gradients into leaf tensors.

Conventions:
  * images are BCHW, conv weights are OIKK
  * f32 is the training dtype, f64 the verification dtype
  * broadcasting is numpy-style but restricted to scalars and same-rank
    shapes whose dims match or are 1 (enough for per-channel affines)
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

Scalar = Union[int, float]

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording inside its scope."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense array plus an optional autodiff tape node.

    ``requires_grad`` marks leaves that should receive gradients.
    Derived tensors track their parents automatically; after
    ``loss.backward()`` every participating leaf holds the accumulated
    gradient in ``.grad`` (zeros if it never participated).
    """

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_grad_fns")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._grad_fns: tuple = ()

    # ------------------------------------------------------------------
    # bookkeeping

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self) -> np.ndarray:
        """Accumulated gradient; all-zero for leaves backward never reached."""
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's data, cut from the graph."""
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # backward

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        ``self`` must be a scalar with a recorded graph.  Repeated calls
        accumulate (call ``zero_grad`` on leaves between steps).
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        if not self._parents:
            raise ValueError("backward() on a tensor with no recorded graph")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                for parent, fn in zip(node._parents, node._grad_fns):
                    if fn is None or not (parent.requires_grad or parent._parents):
                        continue
                    contrib = fn(g)
                    acc = grads.get(id(parent))
                    grads[id(parent)] = contrib if acc is None else acc + contrib
            elif node.requires_grad:
                node._grad = g.copy() if node._grad is None else node._grad + g

    # ------------------------------------------------------------------
    # operator sugar

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_constant_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_constant_like(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return slice_(self, key)

    # ------------------------------------------------------------------
    # method forms of the common ops

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce("mean", self, axes, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def tanh(self):
        return elementwise("tanh", self)

    def sigmoid(self):
        return elementwise("sigmoid", self)

    def relu(self):
        return elementwise("relu", self)

    def leaky_relu(self):
        return elementwise("leaky_relu", self)

    def abs(self):
        return elementwise("abs", self)

    def square(self):
        return elementwise("square", self)

    def sqrt(self):
        return elementwise("sqrt", self)


def _constant_like(value, ref: Tensor) -> Tensor:
    return Tensor(np.asarray(value, dtype=ref.data.dtype), requires_grad=False)


def custom_op(out_data: np.ndarray, parents: Sequence[Tensor],
              grad_fns: Sequence[Optional[Callable[[np.ndarray], np.ndarray]]]) -> Tensor:
    """Record a primitive: output data, parent tensors, per-parent grad closures.

    Each closure maps the output gradient to that parent's gradient
    contribution.  Extension point for ops defined outside this module.
    """
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out._grad = None
    track = _grad_enabled and any(p.requires_grad or p._parents for p in parents)
    if track:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fns = tuple(grad_fns)
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fns = ()
    return out


# ----------------------------------------------------------------------
# broadcasting helpers (scalar or same-rank with dims equal/1)


def _check_broadcast(sa: tuple, sb: tuple) -> None:
    if sa == sb:
        return
    if len(sa) != len(sb):
        raise ValueError(f"shape mismatch: {sa} vs {sb} (ranks differ)")
    for da, db in zip(sa, sb):
        if da != db and da != 1 and db != 1:
            raise ValueError(f"shape mismatch: {sa} vs {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True)


def _binary(a: Tensor, b, fwd, grad_a, grad_b) -> Tensor:
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if isinstance(b, Tensor):
        if a.data.dtype != b.data.dtype:
            raise ValueError(f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}")
        if a.data.ndim != 0 and b.data.ndim != 0:
            _check_broadcast(a.shape, b.shape)
        bt = b
    else:
        bt = _constant_like(b, a)
    ad, bd = a.data, bt.data
    out = fwd(ad, bd)
    sa, sb = ad.shape, bd.shape
    return custom_op(out, (a, bt), (
        lambda g: _unbroadcast(grad_a(g, ad, bd), sa),
        lambda g: _unbroadcast(grad_b(g, ad, bd), sb),
    ))


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary(a, b, np.divide, lambda g, x, y: g / y,
                   lambda g, x, y: -g * x / (y * y))


_LEAKY_SLOPE = 0.2

_UNARY = {
    # name -> (forward, backward(g, x, y))  with y the forward output
    "exp": (np.exp, lambda g, x, y: g * y),
    "log": (np.log, lambda g, x, y: g / x),
    "tanh": (np.tanh, lambda g, x, y: g * (1.0 - y * y)),
    "sigmoid": (lambda x: 1.0 / (1.0 + np.exp(-x)), lambda g, x, y: g * y * (1.0 - y)),
    "relu": (lambda x: np.maximum(x, 0), lambda g, x, y: g * (x > 0)),
    "leaky_relu": (lambda x: np.where(x > 0, x, _LEAKY_SLOPE * x),
                   lambda g, x, y: g * np.where(x > 0, 1.0, _LEAKY_SLOPE)),
    # subgradient of |x| at 0 is 0 (np.sign(0) == 0)
    "abs": (np.abs, lambda g, x, y: g * np.sign(x)),
    "square": (np.square, lambda g, x, y: g * 2.0 * x),
    "sqrt": (np.sqrt, lambda g, x, y: g / (2.0 * y)),
}

_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Apply a named elementwise op; binary ops accept a tensor or scalar ``b``."""
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} is binary and needs two operands")
        return _BINARY[op](a, b)
    if op not in _UNARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    if b is not None:
        raise ValueError(f"{op} is unary")
    fwd, bwd = _UNARY[op]
    x = a.data
    y = fwd(x)
    return custom_op(y, (a,), (lambda g: bwd(g, x, y),))


def reduce(op: str, x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """sum/mean over ``axes`` (all axes when None)."""
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduce op {op!r}")
    if axes is None:
        ax = tuple(range(x.data.ndim))
    elif isinstance(axes, int):
        ax = (axes,)
    else:
        ax = tuple(axes)
    for a in ax:
        if not -x.data.ndim <= a < x.data.ndim:
            raise ValueError(f"invalid axis {a} for shape {x.shape}")
    ax = tuple(a % max(x.data.ndim, 1) for a in ax)
    count = 1
    for a in ax:
        count *= x.shape[a]
    out = x.data.sum(axis=ax, keepdims=keepdims)
    if op == "mean":
        out = out / count
    in_shape = x.shape

    def grad_fn(g):
        gg = g
        if not keepdims and in_shape:
            expand = list(in_shape)
            for a in ax:
                expand[a] = 1
            gg = gg.reshape(expand)
        gg = np.broadcast_to(gg, in_shape)
        if op == "mean":
            gg = gg / count
        return gg.astype(x.data.dtype, copy=False) + np.zeros(in_shape, dtype=x.data.dtype)

    return custom_op(np.asarray(out), (x,), (grad_fn,))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    in_shape = x.shape
    return custom_op(x.data.reshape(shape), (x,), (lambda g: g.reshape(in_shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return custom_op(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                     (lambda g: g.transpose(inv),))


def slice_(x: Tensor, key) -> Tensor:
    out = x.data[key]
    in_shape = x.shape

    def grad_fn(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[key] = g
        return full

    return custom_op(np.ascontiguousarray(out), (x,), (grad_fn,))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat of empty sequence")
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def make_fn(i):
        lo, hi = offsets[i], offsets[i + 1]

        def fn(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        return fn

    return custom_op(out, tuple(tensors), tuple(make_fn(i) for i in range(len(tensors))))


def flip(x: Tensor, axis: int) -> Tensor:
    return custom_op(np.ascontiguousarray(np.flip(x.data, axis=axis)), (x,),
                     (lambda g: np.flip(g, axis=axis),))


# ----------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """(B,C,H,W) -> rows (B*OH*OW, C*kh*kw) of receptive-field patches."""
    b, c, h, w = x.shape
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, C, OH, OW, kh, kw) -> (B, OH, OW, C, kh, kw)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(b * oh * ow, c * kh * kw), oh, ow


def _col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch rows back onto the image grid."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    acc = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    patches = cols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            acc[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += patches[:, :, :, :, i, j]
    if pad > 0:
        acc = acc[:, :, pad:hp - pad, pad:wp - pad]
    return np.ascontiguousarray(acc)


def _conv_validate(x: Tensor, w: Tensor, bias: Optional[Tensor], stride: int, pad: int,
                   transposed: bool) -> None:
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv expects BCHW input and OIKK weight, got {x.shape} and {w.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    cin = w.shape[1] if not transposed else w.shape[0]
    if x.shape[1] != cin:
        raise ValueError(
            f"channel mismatch: input has {x.shape[1]} channels, weight expects {cin}")
    if bias is not None:
        nbias = w.shape[0] if not transposed else w.shape[1]
        if bias.data.shape != (nbias,):
            raise ValueError(f"bias shape {bias.shape} does not match {nbias} output channels")


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, x: (B,Cin,H,W), w: (Cout,Cin,K,K).

    Output H' = floor((H + 2*pad - K)/stride) + 1.
    """
    _conv_validate(x, w, bias, stride, pad, transposed=False)
    b, cin, h, wth = x.shape
    cout, _, kh, kw = w.shape
    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = cols @ wmat.T                      # (B*OH*OW, Cout)
    out = out.reshape(b, oh, ow, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    x_shape = x.shape
    w_shape = w.shape

    def grad_x(g):
        gm = g.transpose(0, 2, 3, 1).reshape(b * oh * ow, cout)
        return _col2im(gm @ wmat, x_shape, kh, kw, stride, pad)

    def grad_w(g):
        gm = g.transpose(0, 2, 3, 1).reshape(b * oh * ow, cout)
        return (gm.T @ cols).reshape(w_shape)

    parents: list[Tensor] = [x, w]
    fns: list = [grad_x, grad_w]
    if bias is not None:
        parents.append(bias)
        fns.append(lambda g: g.sum(axis=(0, 2, 3)))
    return custom_op(out, tuple(parents), tuple(fns))


def conv_transpose2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of ``conv2d`` in its first argument; weight stays (O,I,K,K).

    Input has O channels, output has I channels, and
    H' = (H - 1)*stride - 2*pad + K.
    """
    _conv_validate(x, w, bias, stride, pad, transposed=True)
    b, cout_in, h, wth = x.shape
    o, i, kh, kw = w.shape
    out_h = (h - 1) * stride - 2 * pad + kh
    out_w = (wth - 1) * stride - 2 * pad + kw
    if out_h < 1 or out_w < 1:
        raise ValueError(f"conv_transpose2d output would be empty: ({out_h},{out_w})")
    wmat = w.data.reshape(o, i * kh * kw)
    xm = x.data.transpose(0, 2, 3, 1).reshape(b * h * wth, o)
    out = _col2im(xm @ wmat, (b, i, out_h, out_w), kh, kw, stride, pad)
    if bias is not None:
        out = out + bias.data.reshape(1, i, 1, 1)

    w_shape = w.shape

    def grad_x(g):
        cols, goh, gow = _im2col(g, kh, kw, stride, pad)
        gx = cols @ wmat.T
        return np.ascontiguousarray(gx.reshape(b, goh, gow, o).transpose(0, 3, 1, 2))

    def grad_w(g):
        cols, _, _ = _im2col(g, kh, kw, stride, pad)
        return (xm.T @ cols).reshape(w_shape)

    parents: list[Tensor] = [x, w]
    fns: list = [grad_x, grad_w]
    if bias is not None:
        parents.append(bias)
        fns.append(lambda g: g.sum(axis=(0, 2, 3)))
    return custom_op(out, tuple(parents), tuple(fns))


# ----------------------------------------------------------------------
# verification


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    f64 only.  Error per component is |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
    """
    if x.data.dtype != np.float64:
        raise ValueError("grad_check requires a float64 tensor")
    if not x.requires_grad:
        raise ValueError("grad_check target must have requires_grad=True")
    x.zero_grad()
    out = f(x)
    out.backward()
    g_ad = x.grad.copy()

    g_fd = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    fd_flat = g_fd.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(x).data.reshape(()))
            flat[i] = orig - eps
            lo = float(f(x).data.reshape(()))
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)
    return float(np.max(np.abs(g_ad - g_fd) / denom))
