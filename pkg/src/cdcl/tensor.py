"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation builds a node in a per-forward-pass computation graph
(dynamic tape). Calling :func:`backward` on a scalar result walks the tape
once and accumulates gradients into every tracked tensor. A finite-difference
checker (:func:`grad_check`) validates any differentiable closure against
central differences.

All values are 64-bit floats. Graphs are not thread-safe; confine a graph and
its tensors to one thread.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "GradReport",
    "DimensionError",
    "GraphError",
    "tensor",
    "no_grad",
    "backward",
    "grad_check",
    "add",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "flatten",
    "concat",
    "narrow",
    "tsum",
    "tmean",
    "conv2d",
    "avg_pool2d",
    "softmax",
    "sigmoid",
    "silu",
    "layer_norm",
    "bce_loss",
]

BCE_EPS = 1e-7  # probability clamp; keeps log() finite for soft targets


class DimensionError(ValueError):
    """Shapes passed to an operation are incompatible."""


class GraphError(RuntimeError):
    """Computation-graph contract violated (non-scalar loss, reused graph...)."""


_uid_counter = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference / FD probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float64 array; node in a reverse-mode graph.

    ``grad`` holds the accumulated gradient after :func:`backward` runs on a
    scalar that depends on this tensor. ``graph_id`` is a process-unique node
    identity. A non-leaf tensor may participate in at most one backward pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "graph_id", "_parents", "_backward", "_swept")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise DimensionError(f"tensors must have positive extents, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.graph_id = next(_uid_counter)
        self._parents = ()
        self._backward = None
        self._swept = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are allowed on either side
    def __add__(self, other):
        return add(self, _coerce(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -_coerce(other))

    def __rsub__(self, other):
        return add(_coerce(other), -self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _from_op(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Wrap an op result; track the graph only when grads are live."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor):
    """Run one reverse sweep from a scalar loss, accumulating ``grad`` fields.

    Gradients add across fan-out. Re-running backward through an already-swept
    graph raises :class:`GraphError`.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not attached to a tracked computation graph")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    for node in topo:
        if node._parents and node._swept:
            raise GraphError("graph already consumed by a previous backward pass")

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
        if node._parents:
            node._swept = True


# ---------------------------------------------------------------------------
# elementwise and shape ops


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, ext in enumerate(shape):
        if ext == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _from_op(data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _from_op(data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        _accum(a, g * s)

    return _from_op(a.data * s, (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, np.transpose(g, inv))

    return _from_op(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = np.reshape(a.data, shape)

    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _from_op(data, (a,), bw)


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.size,))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} along axis {axis}"
        ) from None
    extents = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _from_op(data, tensors, bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > a.shape[axis]:
        raise DimensionError(
            f"narrow: [{start}, {start + length}) out of range for extent {a.shape[axis]}"
        )
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _from_op(a.data[idx].copy(), (a,), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(ge, a.shape))

    return _from_op(np.asarray(data), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.shape[axis]

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / count, a.shape))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(ge / count, a.shape))

    return _from_op(np.asarray(data), (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; either plain 2-D or stacked with equal leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    data = np.matmul(a.data, b.data)

    def bw(g):
        _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        _accum(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _from_op(data, (a, b), bw)


# ---------------------------------------------------------------------------
# spatial ops


def _as_batched(x: Tensor):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"expected a (c,H,W) or (N,c,H,W) tensor, got shape {x.shape}")


def _window_cols(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """(N,C,Hp,Wp) -> (N,C,OH,OW,kh,kw) strided window view."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::sh, ::sw, :, :]


def _scatter_windows(dwin: np.ndarray, n, c, hp, wp, kh, kw, sh, sw) -> np.ndarray:
    """Adjoint of `_window_cols` with dwin laid out (N,C,kh,kw,OH,OW)."""
    oh, ow = dwin.shape[4], dwin.shape[5]
    out = np.zeros((n, c, hp, wp), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += dwin[:, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), zero padding, no dilation.

    ``x`` is (c_in,H,W) or batched (N,c_in,H,W); ``w`` is (c_out,c_in,kh,kw).
    Output extent is floor((H + 2*padding - kh)/stride) + 1.
    """
    xb, squeeze = _as_batched(x)
    if w.ndim != 4:
        raise DimensionError(f"conv2d kernel must be 4-D, got shape {w.shape}")
    n, cin, h, wd = xb.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d: input channels {xb.shape} vs kernel {w.shape}")
    if stride < 1:
        raise DimensionError(f"conv2d stride must be >= 1, got {stride}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {w.shape} exceeds padded input {(cin, hp, wp)}")

    if padding:
        xpad = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xpad = xb
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    win = _window_cols(xpad, kh, kw, stride, stride)
    # (N, C*kh*kw, OH*OW) with the kernel axes contiguous per column
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, cin * kh * kw, oh * ow)
    wm = w.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wm, cols).reshape(n, cout, oh, ow)

    def bw(g):
        gm = (g[None] if squeeze else g).reshape(n, cout, oh * ow)
        _accum(w, np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape))
        dcols = np.matmul(wm.T, gm)  # (N, C*kh*kw, OH*OW)
        dwin = dcols.reshape(n, cin, kh, kw, oh, ow)
        dxp = _scatter_windows(dwin, n, cin, hp, wp, kh, kw, stride, stride)
        dx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
        _accum(x, dx[0] if squeeze else dx)

    return _from_op(out[0] if squeeze else out, (x, w), bw)


def avg_pool2d(x: Tensor, kh: int, kw: int, sh: int, sw: int) -> Tensor:
    """Mean over kh x kw windows, strides (sh, sw), no padding; windows may overlap."""
    xb, squeeze = _as_batched(x)
    n, c, h, w = xb.shape
    if kh > h or kw > w:
        raise DimensionError(f"avg_pool2d: kernel ({kh},{kw}) exceeds input {x.shape}")
    if sh < 1 or sw < 1:
        raise DimensionError(f"avg_pool2d strides must be >= 1, got ({sh},{sw})")
    win = _window_cols(xb, kh, kw, sh, sw)
    out = win.mean(axis=(-2, -1))
    oh, ow = out.shape[2], out.shape[3]

    def bw(g):
        gs = (g[None] if squeeze else g) / (kh * kw)
        dx = np.zeros((n, c, h, w), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += gs
        _accum(x, dx[0] if squeeze else dx)

    return _from_op(out[0] if squeeze else out, (x,), bw)


# ---------------------------------------------------------------------------
# nonlinearities and losses


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Shift-stabilized softmax along ``axis``; rows sum to 1."""
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        _accum(x, y * (g - dot))

    return _from_op(y, (x,), bw)


def _sigmoid_values(v: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_values(x.data)

    def bw(g):
        _accum(x, g * y * (1.0 - y))

    return _from_op(y, (x,), bw)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x); smooth everywhere, which keeps FD gradient checks clean."""
    s = _sigmoid_values(x.data)
    y = x.data * s

    def bw(g):
        _accum(x, g * (s + x.data * s * (1.0 - s)))

    return _from_op(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({d},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    lead = tuple(range(x.ndim - 1))

    def bw(g):
        _accum(gain, np.sum(g * xhat, axis=lead))
        _accum(bias, np.sum(g, axis=lead))
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, (dxhat - m1 - xhat * m2) * inv)

    return _from_op(y, (x, gain, bias), bw)


def bce_loss(p: Tensor, y: Tensor, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy over all elements; supports soft targets.

    ``p`` is clamped into [eps, 1-eps] before the logs; the clamp passes no
    gradient outside that interval.
    """
    if p.shape != y.shape:
        raise DimensionError(f"bce_loss: prediction {p.shape} vs target {y.shape}")
    pc = np.clip(p.data, eps, 1.0 - eps)
    n = pc.size
    val = -(y.data * np.log(pc) + (1.0 - y.data) * np.log1p(-pc)).sum() / n
    inside = (p.data > eps) & (p.data < 1.0 - eps)

    def bw(g):
        gs = float(g.reshape(()))
        dp = np.where(inside, (pc - y.data) / (pc * (1.0 - pc)), 0.0) / n
        _accum(p, gs * dp)
        dy = (np.log1p(-pc) - np.log(pc)) / n
        _accum(y, gs * dy)

    return _from_op(np.float64(val), (p, y), bw)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradReport:
    """Outcome of one finite-difference check."""

    op_name: str
    max_rel_error: float
    tolerance: float
    passed: bool
    detail: str = ""


def grad_check(
    op_closure,
    inputs,
    tolerance: float,
    *,
    op_name: str = "op",
    step: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradReport:
    """Compare reverse-mode gradients with central finite differences.

    ``op_closure`` maps the given tensors to a scalar Tensor. Relative error
    per coordinate uses the denominator max(|a|, |b|, 1e-8). When
    ``max_entries`` is set, at most that many coordinates per input are
    probed (chosen by ``rng``), which keeps large-model checks tractable.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()

    out = op_closure(*inputs)
    if out.size != 1:
        raise GraphError(f"grad_check closure must return a scalar, got {out.shape}")
    backward(out)
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]
    for g in analytic:
        if not np.all(np.isfinite(g)):
            return GradReport(op_name, float("inf"), tolerance, False, "non-finite autodiff gradient")

    def probe() -> float:
        with no_grad():
            return op_closure(*inputs).item()

    max_rel = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(flat.size, size=max_entries, replace=False)
        else:
            coords = range(flat.size)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = probe()
            flat[i] = orig - step
            f_minus = probe()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            if not np.isfinite(fd):
                return GradReport(op_name, float("inf"), tolerance, False, "non-finite finite-difference value")
            denom = max(abs(gflat[i]), abs(fd), 1e-8)
            max_rel = max(max_rel, abs(gflat[i] - fd) / denom)

    for t in inputs:
        t.zero_grad()
    return GradReport(op_name, max_rel, tolerance, max_rel <= tolerance)
