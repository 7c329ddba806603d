"""Dense float64 tensors with reverse-mode automatic differentiation.

Implements the differentiable primitives needed by a small convolutional
encoder/decoder network: elementwise arithmetic, matmul, activations,
reductions, 2d convolution, 2x2 max pooling, nearest-neighbour upsampling,
batch normalization and channel concatenation.  The graph is rebuilt on
every forward pass (define-by-run); gradients are verified against central
finite differences via :func:`grad_check`.

Everything is float64.  Speed is secondary to gradient fidelity at the
scale this package runs at.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class Tensor:
    """A dense float64 array node in a reverse-mode differentiation graph.

    ``grad`` is populated by :func:`backward` and accumulates across calls
    until :meth:`zero_grad` is invoked.  Leaf tensors (no parents) with
    ``requires_grad=True`` are the trainable inputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0 or any(s < 1 for s in arr.shape):
            raise ShapeError(f"tensor extents must all be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the module-level functions do the real work
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Create a graph node; drops the graph if no parent needs gradients."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear algebra primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _node(data, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    data = np.where(mask, x.data, 0.0)

    def bw(g):
        return (g * mask,)

    return _node(data, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    v = x.data
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _node(out, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis, max-shifted for stability."""
    v = x.data
    m = v.max(axis=-1, keepdims=True)
    shifted = v - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse

    def bw(g):
        soft = np.exp(data)
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _node(data, (x,), bw)


def tsum(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum())

    def bw(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(data, (x,), bw)


def tmean(x: Tensor) -> Tensor:
    n = x.size
    data = np.asarray(x.data.mean())

    def bw(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _node(data, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _node(data, (x,), bw)


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate 4-d tensors along the channel axis (skip connections)."""
    if any(t.data.ndim != 4 for t in tensors):
        raise ShapeError("concat_channels expects 4-d tensors")
    data = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return _node(data, tuple(tensors), bw)


# ---------------------------------------------------------------------------
# spatial primitives
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N,C,Hp,Wp) padded input -> (N*Ho*Wo, C*kh*kw) patch matrix."""
    view = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = view.shape[:4]
    return view.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: int = 1, stride: int = 1) -> Tensor:
    """Cross-correlation with bias; gradients w.r.t. input, weight and bias."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    n, cin, h, wi = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin} vs weight {cin_w}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({cout},)")
    if stride <= 0:
        raise ShapeError(f"conv2d stride must be positive, got {stride}")
    if padding < 0:
        raise ShapeError("conv2d padding must be non-negative")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wi + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d output would be empty")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    col = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(cout, -1)
    out = (col @ wmat.T + b.data).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gmat.T @ col).reshape(w.shape)
        gb = gmat.sum(axis=0)
        if stride == 1:
            # input gradient = correlation of g with the flipped kernel
            wt = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
            pb = kh - 1 - padding
            gp = np.pad(g, ((0, 0), (0, 0), (pb, pb), (pb, pb))) if pb >= 0 else \
                g[:, :, -pb:pb, -pb:pb]
            gcol = _im2col(gp, kh, kw, 1)
            gx = (gcol @ wt.T).reshape(n, h, wi, cin).transpose(0, 3, 1, 2)
        else:
            gcol = (gmat @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros((n, cin, h + 2 * padding, wi + 2 * padding))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        gcol[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding:padding + h, padding:padding + wi]
        return np.ascontiguousarray(gx), gw, gb

    return _node(np.ascontiguousarray(out), (x, w, b), bw)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling; gradient routed to the first max in row-major order."""
    if x.data.ndim != 4:
        raise ShapeError("maxpool2x2 expects a 4-d tensor")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    ho, wo = h // 2, w // 2
    # window axis is laid out row-major, so argmax picks the first max on ties
    win = (
        x.data.reshape(n, c, ho, 2, wo, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, 4)
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gwin = np.zeros((n, c, ho, wo, 4))
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = (
            gwin.reshape(n, c, ho, wo, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (np.ascontiguousarray(gx),)

    return _node(np.ascontiguousarray(out), (x,), bw)


def upsample2x_nearest(x: Tensor) -> Tensor:
    """Replicate each cell into a 2x2 block; backward sums the four cells."""
    if x.data.ndim != 4:
        raise ShapeError("upsample2x_nearest expects a 4-d tensor")
    n, c, h, w = x.shape
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _node(data, (x,), bw)


class BatchNormState:
    """Running statistics for one batchnorm layer (not part of the graph)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                mode: str = "train") -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes with the batch statistics (population variance)
    and updates the running statistics in ``state``; eval mode uses the
    running statistics and leaves them untouched.
    """
    if x.data.ndim != 4:
        raise ShapeError("batchnorm2d expects a 4-d tensor")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm2d gamma/beta must have one value per channel")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    gam = gamma.data.reshape(1, c, 1, 1)

    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ShapeError("batchnorm2d train mode needs at least 2 samples per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mean
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * var
    else:
        mean = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gam * xhat + beta.data.reshape(1, c, 1, 1)

    if mode == "train":
        def bw(g):
            m_ = n * h * w
            g_mean = g.mean(axis=(0, 2, 3), keepdims=True)
            gx_hat_mean = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = gam * inv_std.reshape(1, c, 1, 1) * (g - g_mean - xhat * gx_hat_mean)
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gbeta = g.sum(axis=(0, 2, 3))
            del m_
            return gx, ggamma, gbeta
    else:
        def bw(g):
            gx = g * gam * inv_std.reshape(1, c, 1, 1)
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gbeta = g.sum(axis=(0, 2, 3))
            return gx, ggamma, gbeta

    return _node(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# backward pass and verification
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Propagate gradients from a scalar loss through the graph.

    Leaf tensors with ``requires_grad`` accumulate into ``grad`` across
    repeated calls; intermediate nodes get their gradient from this pass.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    # iterative post-order topological sort
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents:
            node.grad = g  # intermediate: gradient from this pass
            for p, pg in zip(node._parents, node._backward(g)):
                if not p.requires_grad or pg is None:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        elif node.requires_grad:
            node._accumulate(g)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued and rebuild its graph on every call.
    The error metric is |analytic - numeric| / max(1, |analytic|).
    """
    x.requires_grad = True
    x.zero_grad()
    backward(f(x))
    analytic = x.grad.copy()
    x.zero_grad()

    numeric = np.empty_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max())


def run_gradient_suite(seeds=range(5), h: float = 1e-5) -> dict[str, float]:
    """Finite-difference check of every differentiable primitive.

    Returns the max relative error per primitive, taken over the given
    seeds on small random inputs.
    """
    results: dict[str, float] = {}

    def record(name, err):
        results[name] = max(results.get(name, 0.0), err)

    for seed in seeds:
        rng = np.random.default_rng(seed)

        def r(*s):
            return Tensor(rng.standard_normal(s))

        # constants are drawn once per seed: grad_check re-evaluates f and
        # needs it to be a pure function of its argument
        c34 = r(3, 4)
        record("add", grad_check(lambda t: tsum(add(t, c34)), r(3, 4), h))
        record("mul", grad_check(lambda t: tsum(mul(t, c34)), r(3, 4), h))
        c42 = r(4, 2)
        record("matmul", grad_check(lambda t: tsum(matmul(t, c42)), r(3, 4), h))
        # keep relu inputs away from the kink at 0
        x_relu = rng.standard_normal((3, 4))
        x_relu += np.sign(x_relu) * 0.2
        record("relu", grad_check(lambda t: tsum(relu(t)), Tensor(x_relu), h))
        record("sigmoid", grad_check(lambda t: tsum(mul(sigmoid(t), c34)), r(3, 4), h))
        c23 = r(2, 3)
        record("log_softmax", grad_check(
            lambda t: tsum(mul(log_softmax(t), c23)), r(2, 3), h))
        record("sum", grad_check(lambda t: tsum(t), r(3, 4), h))
        record("mean", grad_check(lambda t: tmean(mul(t, t)), r(3, 4), h))
        c28 = r(2, 8)
        record("flatten", grad_check(
            lambda t: tsum(mul(flatten(t), c28)), r(2, 2, 2, 2), h))
        c_cat = r(1, 4, 2, 2)
        record("concat", grad_check(
            lambda t: tsum(mul(concat_channels([t, t]), c_cat)), r(1, 2, 2, 2), h))

        cw, cb, cmix = r(2, 2, 3, 3), r(2), r(1, 2, 4, 4)
        record("conv2d", grad_check(
            lambda t: tsum(mul(conv2d(t, cw, cb, 1, 1), cmix)), r(1, 2, 4, 4), h))
        c_pool = r(1, 1, 2, 2)
        record("maxpool2x2", grad_check(
            lambda t: tsum(mul(maxpool2x2(t), c_pool)), r(1, 1, 4, 4), h))
        c_up = r(1, 1, 4, 4)
        record("upsample2x", grad_check(
            lambda t: tsum(mul(upsample2x_nearest(t), c_up)), r(1, 1, 2, 2), h))

        bn_gamma, bn_beta, bn_mix = r(2), r(2), r(2, 2, 3, 3)

        def f_bn(t):
            st = BatchNormState(2)
            return tsum(mul(batchnorm2d(t, bn_gamma, bn_beta, st, "train"), bn_mix))

        record("batchnorm2d", grad_check(f_bn, r(2, 2, 3, 3), h))

    return results
