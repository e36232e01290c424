"""Dense tensors with reverse-mode automatic differentiation on numpy.

Data lives in contiguous numpy arrays (float32 by default, float64 inside
reductions and convolutions). Every operation that touches a tensor with
``requires_grad`` records parent links and an adjoint closure; ``backward()``
on a scalar walks the recorded graph in reverse topological order and
accumulates gradients into ``.grad``. Non-leaf tensors must never be mutated
in place while a graph referencing them is alive.
"""

from __future__ import annotations

import contextlib

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for newly created tensors.

    Gradient-check harnesses run whole models under float64 to keep finite
    differences out of the float32 noise floor; everything else stays float32.
    """
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-dimensional float array that can participate in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
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

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff engine -----------------------------------------------------

    def backward(self):
        """Accumulate gradients of this scalar into every reachable tensor.

        Repeated calls keep accumulating until grads are zeroed; replay over
        an unchanged graph is deterministic.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
            )
        order = []
        seen = set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        upstream = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = upstream.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pid = id(parent)
                if pid in upstream:
                    upstream[pid] = upstream[pid] + pg
                else:
                    upstream[pid] = pg

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents, backward, requires_grad=None) -> Tensor:
    """Wrap an op result in a Tensor, recording the tape edge when tracking.

    ``backward`` maps the upstream gradient array to one gradient array (or
    None) per parent. Extension primitives (the scan kernel) use this hook.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    if requires_grad is None:
        requires_grad = any(p.requires_grad for p in parents)
    out.requires_grad = _GRAD_ENABLED and requires_grad
    out.grad = None
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


# -- broadcasting helpers ------------------------------------------------------


def _check_broadcast(a: np.ndarray, b: np.ndarray):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"cannot broadcast shapes {a.shape} and {b.shape}"
        ) from None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return make_node(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_node(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return make_node(out, (a,), bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def softplus(a) -> Tensor:
    """log(1 + exp(x)) computed without overflow; gradient is sigmoid(x)."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def bwd(g):
        with np.errstate(over="ignore"):
            return (g / (1.0 + np.exp(-x)),)

    return make_node(out, (a,), bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,))


def silu(a) -> Tensor:
    return mul(a, sigmoid(a))


ELEMENTWISE_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "softplus": softplus,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name; binary kinds need ``b``."""
    fn = ELEMENTWISE_OPS.get(kind)
    if fn is None:
        raise ValueError(f"unknown elementwise op {kind!r}")
    if kind in ("add", "sub", "mul", "div"):
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return fn(a, b)
    return fn(a)


# -- reductions and shape ops ----------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % a.ndim for ax in axes)
            shape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
            g = g.reshape(shape)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return make_node(out, (a,), bwd)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax % a.ndim]
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return make_node(out, (a,), lambda g: (g.transpose(inv),))


def getitem(a, key) -> Tensor:
    """Basic indexing (ints, slices, tuples thereof) with scatter adjoint."""
    a = as_tensor(a)
    out = a.data[key]
    if isinstance(out, np.ndarray):
        out = out.copy()
    else:
        out = np.asarray(out, dtype=a.dtype)

    def bwd(g):
        gx = np.zeros_like(a.data)
        gx[key] += g
        return (gx,)

    return make_node(out, (a,), bwd)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make_node(out, tuple(tensors), bwd)


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def take_rows(a, index) -> Tensor:
    """Select rows ``a[index]`` along the first axis; adjoint scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("take_rows needs a 1-D index")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(
            f"row index out of range for first extent {a.shape[0]}"
        )
    out = a.data[idx].copy()

    def bwd(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_node(out, (a,), bwd)


def flip_rows(a) -> Tensor:
    a = as_tensor(a)
    return take_rows(a, np.arange(a.shape[0] - 1, -1, -1))


# -- matmul ---------------------------------------------------------------------


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    """Batched matrix product with broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs tensors with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul inner extents differ: {a.shape} vs {b.shape}"
        )
    out = np.matmul(a.data.astype(np.float64), b.data.astype(np.float64))
    out = out.astype(a.dtype)

    def bwd(g):
        g64 = g.astype(np.float64)
        ga = np.matmul(g64, _swap_last(b.data.astype(np.float64)))
        gb = np.matmul(_swap_last(a.data.astype(np.float64)), g64)
        ga = _unbroadcast(ga, a.shape).astype(a.dtype)
        gb = _unbroadcast(gb, b.shape).astype(b.dtype)
        return ga, gb

    return make_node(out, (a, b), bwd)


# -- convolutions -----------------------------------------------------------------


def _pair(v):
    return tuple(v) if isinstance(v, (tuple, list)) else (v, v)


def conv2d(x, w, bias=None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation of ``x[Cin,H,W]`` with ``w[Cout,Cin,kh,kw]``.

    ``padding`` may be "same" (odd kernels, stride 1). Accumulation runs in
    float64 regardless of the tensor dtype.
    """
    x, w = as_tensor(x), as_tensor(w)
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {cin} vs kernel {cin_w}")
    sh, sw = _pair(stride)
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("same padding needs odd kernel extents")
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    else:
        ph, pw = _pair(padding)
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(
            f"conv2d output extent not positive: input {(h, wd)}, kernel {(kh, kw)}, "
            f"stride {(sh, sw)}, padding {(ph, pw)}"
        )

    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw))).astype(np.float64)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::sh, ::sw]  # [Cin, oh, ow, kh, kw]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, cin * kh * kw)
    wmat = w.data.reshape(cout, -1).astype(np.float64)
    out = cols @ wmat.T
    if bias is not None:
        out = out + as_tensor(bias).data.astype(np.float64)
    out = out.reshape(oh, ow, cout).transpose(2, 0, 1).astype(x.dtype)

    parents = (x, w) if bias is None else (x, w, as_tensor(bias))

    def bwd(g):
        gmat = g.transpose(1, 2, 0).reshape(oh * ow, cout).astype(np.float64)
        gw = (gmat.T @ cols).reshape(w.shape).astype(w.dtype)
        gcols = (gmat @ wmat).reshape(oh, ow, cin, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + sh * oh : sh, j : j + sw * ow : sw] += (
                    gcols[:, :, :, i, j].transpose(2, 0, 1)
                )
        gx = gxp[:, ph : ph + h, pw : pw + wd].astype(x.dtype)
        if bias is None:
            return gx, gw
        gb = gmat.sum(axis=0).astype(x.dtype)
        return gx, gw, gb

    return make_node(out, parents, bwd)


def conv3d(x, w, bias=None, stride=1, padding=0) -> Tensor:
    """3-D cross-correlation of ``x[Cin,T,H,W]`` with ``w[Cout,Cin,kt,kh,kw]``."""
    x, w = as_tensor(x), as_tensor(w)
    cin, t, h, wd = x.shape
    cout, cin_w, kt, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv3d channel mismatch: input {cin} vs kernel {cin_w}")
    st, sh, sw = stride if isinstance(stride, (tuple, list)) else (stride,) * 3
    if padding == "same":
        if kt % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("same padding needs odd kernel extents")
        pt, ph, pw = (kt - 1) // 2, (kh - 1) // 2, (kw - 1) // 2
    else:
        pt, ph, pw = padding if isinstance(padding, (tuple, list)) else (padding,) * 3
    ot = (t + 2 * pt - kt) // st + 1
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    if ot <= 0 or oh <= 0 or ow <= 0:
        raise ValueError(
            f"conv3d output extent not positive: input {(t, h, wd)}, "
            f"kernel {(kt, kh, kw)}, stride {(st, sh, sw)}, padding {(pt, ph, pw)}"
        )

    xp = np.pad(x.data, ((0, 0), (pt, pt), (ph, ph), (pw, pw))).astype(np.float64)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kt, kh, kw), axis=(1, 2, 3))
    win = win[:, ::st, ::sh, ::sw]
    cols = win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(ot * oh * ow, cin * kt * kh * kw)
    wmat = w.data.reshape(cout, -1).astype(np.float64)
    out = cols @ wmat.T
    if bias is not None:
        out = out + as_tensor(bias).data.astype(np.float64)
    out = out.reshape(ot, oh, ow, cout).transpose(3, 0, 1, 2).astype(x.dtype)

    parents = (x, w) if bias is None else (x, w, as_tensor(bias))

    def bwd(g):
        gmat = g.transpose(1, 2, 3, 0).reshape(ot * oh * ow, cout).astype(np.float64)
        gw = (gmat.T @ cols).reshape(w.shape).astype(w.dtype)
        gcols = (gmat @ wmat).reshape(ot, oh, ow, cin, kt, kh, kw)
        gxp = np.zeros_like(xp)
        for a in range(kt):
            for i in range(kh):
                for j in range(kw):
                    gxp[
                        :,
                        a : a + st * ot : st,
                        i : i + sh * oh : sh,
                        j : j + sw * ow : sw,
                    ] += gcols[:, :, :, :, a, i, j].transpose(3, 0, 1, 2)
        gx = gxp[:, pt : pt + t, ph : ph + h, pw : pw + wd].astype(x.dtype)
        if bias is None:
            return gx, gw
        gb = gmat.sum(axis=0).astype(x.dtype)
        return gx, gw, gb

    return make_node(out, parents, bwd)


# -- pixel shuffle and resampling ------------------------------------------------


def pixel_shuffle(x, r: int) -> Tensor:
    """Rearrange ``[C*r*r, H, W]`` into ``[C, r*H, r*W]`` (exact bijection)."""
    x = as_tensor(x)
    crr, h, w = x.shape
    if crr % (r * r) != 0:
        raise ValueError(f"channel count {crr} not divisible by r*r = {r * r}")
    c = crr // (r * r)
    y = reshape(x, (c, r, r, h, w))
    y = transpose(y, (0, 3, 1, 4, 2))
    return reshape(y, (c, h * r, w * r))


def pixel_unshuffle(x, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    x = as_tensor(x)
    c, hr, wr = x.shape
    if hr % r != 0 or wr % r != 0:
        raise ValueError(f"spatial extents {(hr, wr)} not divisible by r = {r}")
    h, w = hr // r, wr // r
    y = reshape(x, (c, h, r, w, r))
    y = transpose(y, (0, 2, 4, 1, 3))
    return reshape(y, (c * r * r, h, w))


def avg_pool2(x) -> Tensor:
    """2x2 average pooling of ``[C, H, W]`` (extents must be even)."""
    x = as_tensor(x)
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even extents, got {(h, w)}")
    y = reshape(x, (c, h // 2, 2, w // 2, 2))
    return tmean(y, axis=(2, 4))


_BILINEAR_CACHE: dict = {}


def _bilinear_matrix(n: int, dtype) -> np.ndarray:
    """Dense [2n, n] matrix of 2x upsampling weights (half-pixel centers)."""
    key = (n, np.dtype(dtype).str)
    m = _BILINEAR_CACHE.get(key)
    if m is None:
        m = np.zeros((2 * n, n), dtype=dtype)
        for o in range(2 * n):
            src = (o + 0.5) / 2.0 - 0.5
            i0 = int(np.floor(src))
            f = src - i0
            i0c = min(max(i0, 0), n - 1)
            i1c = min(max(i0 + 1, 0), n - 1)
            m[o, i0c] += 1.0 - f
            m[o, i1c] += f
        _BILINEAR_CACHE[key] = m
    return m


def upsample_bilinear2(x) -> Tensor:
    """Bilinear 2x upsampling of ``[C, H, W]`` via separable weight matrices."""
    x = as_tensor(x)
    _, h, w = x.shape
    mr = Tensor(_bilinear_matrix(h, x.dtype))
    mc = Tensor(_bilinear_matrix(w, x.dtype))
    return matmul(matmul(mr, x), transpose(mc, (1, 0)))
