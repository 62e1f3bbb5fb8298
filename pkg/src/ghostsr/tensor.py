"""Dense NCHW tensor engine with reverse-mode autodiff.

Just enough operations for shift-augmented super-resolution networks:
same-padded stride-1 convolution, depthwise convolution, channel
concat/slice/gather, pixel shuffle, relu, add, scaling, integer shifts and
two training losses.  Tensors are immutable after construction; every op
records a backward closure and ``backward`` replays them in reverse
topological order.

Storage is float32 by default.  Gradient checking needs more headroom, so
the engine has a global float64 mode (``using_dtype("float64")``).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    _state.dtype = dt


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the engine-wide storage dtype."""
    prev = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_prev", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=default_dtype())
        if arr.size == 0 or (arr.ndim > 0 and min(arr.shape) < 1):
            raise ValueError(f"all dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._prev = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _result(data, prev, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(t.requires_grad for t in prev)
    if out.requires_grad:
        out._prev = tuple(prev)
        out._backward = backward_fn
    else:
        out._prev = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if t.grad is None:
        t.grad = grad.copy() if grad.base is not None or not grad.flags.owndata else grad
    else:
        t.grad = t.grad + grad


def backward(loss: Tensor, params=None):
    """Run reverse-mode differentiation from a scalar loss.

    Returns a dict mapping each tensor in ``params`` to its gradient;
    parameters the loss does not reach get zero gradients.  Gradients are
    also left on ``Tensor.grad`` for every reached node.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")

    # Iterative topological sort: training graphs can be deep.
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for child in node._prev:
            if id(child) not in visited:
                stack.append((child, False))

    for node in topo:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    if params is None:
        return {}
    return {
        p: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for p in params
    }


# ---------------------------------------------------------------------------
# convolution


def _check_nchw(x: Tensor, op: str):
    if x.data.ndim != 4:
        raise ValueError(f"{op}: expected NCHW tensor, got ndim={x.data.ndim}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded stride-1 convolution of NCHW ``x`` with (co, ci, s, s) weights.

    The kernel size must be odd so that zero same-padding of (s-1)/2 keeps
    the spatial resolution.  Differentiable w.r.t. input, weight and bias.
    """
    _check_nchw(x, "conv2d")
    if weight.data.ndim != 4:
        raise ValueError(f"conv2d: weight must be rank 4, got ndim={weight.data.ndim}")
    n, ci, h, w = x.data.shape
    co, ci_w, s, s2 = weight.data.shape
    if s != s2:
        raise ValueError(f"conv2d: kernel must be square, got {s}x{s2}")
    if s % 2 != 1:
        raise ValueError(f"conv2d: kernel size must be odd, got s={s}")
    if ci_w != ci:
        raise ValueError(
            f"conv2d: input has {ci} channels but weight expects {ci_w}"
        )
    if bias is not None and bias.data.shape != (co,):
        raise ValueError(
            f"conv2d: bias shape {bias.data.shape} does not match c_o={co}"
        )

    p = (s - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    # im2col through a strided view, then one batched GEMM per image
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(n, ci, s, s, h, w), strides=(sn, sc, sh, sw, sh, sw)
    )
    cols = np.ascontiguousarray(view).reshape(n, ci * s * s, h * w)
    w_mat = weight.data.reshape(co, ci * s * s)
    out = np.matmul(w_mat, cols).reshape(n, co, h, w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    prev = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        g_flat = g.reshape(n, co, h * w)
        if weight.requires_grad:
            gw = np.matmul(g_flat, cols.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(weight, gw.reshape(weight.data.shape))
        if x.requires_grad:
            gcols = np.matmul(w_mat.T, g_flat).reshape(n, ci, s, s, h, w)
            gx = np.zeros_like(x.data)
            # col2im: scatter each tap back with clipped ranges (no pad buffer)
            for ky in range(s):
                dy = ky - p
                ty0, ty1 = max(0, dy), min(h, h + dy)
                for kx in range(s):
                    dx = kx - p
                    tx0, tx1 = max(0, dx), min(w, w + dx)
                    gx[:, :, ty0:ty1, tx0:tx1] += gcols[
                        :, :, ky, kx, ty0 - dy : ty1 - dy, tx0 - dx : tx1 - dx
                    ]
            _accumulate(x, gx)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))

    return _result(out, prev, _bw)


def conv2d_naive(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None):
    """Direct-summation convolution used as the correctness oracle.

    Pure numpy arrays in, pure numpy array out; intentionally written as the
    literal definition (loop over every output element).
    """
    n, ci, h, w = x.shape
    co, _, s, _ = weight.shape
    p = (s - 1) // 2
    out = np.zeros((n, co, h, w), dtype=x.dtype)
    for b in range(n):
        for o in range(co):
            for y in range(h):
                for xx in range(w):
                    acc = 0.0
                    for dy in range(s):
                        for dx in range(s):
                            yy = y + dy - p
                            xx2 = xx + dx - p
                            if 0 <= yy < h and 0 <= xx2 < w:
                                acc += np.dot(x[b, :, yy, xx2], weight[o, :, dy, dx])
                    out[b, o, y, xx] = acc
            if bias is not None:
                out[b, o] += bias[o]
    return out


def depthwise_conv2d(x: Tensor, kernels: Tensor) -> Tensor:
    """Per-channel convolution: ``kernels`` has shape (c, k, k), zero same-padding."""
    _check_nchw(x, "depthwise_conv2d")
    n, c, h, w = x.data.shape
    if kernels.data.ndim != 3 or kernels.data.shape[0] != c:
        raise ValueError(
            f"depthwise_conv2d: kernels must be ({c}, k, k), got {kernels.data.shape}"
        )
    k = kernels.data.shape[1]
    if k != kernels.data.shape[2] or k % 2 != 1:
        raise ValueError(f"depthwise_conv2d: kernel must be square odd, got {kernels.data.shape[1:]}")
    p = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros_like(x.data)
    for ky in range(k):
        for kx in range(k):
            out += kernels.data[:, ky, kx][None, :, None, None] * xp[
                :, :, ky : ky + h, kx : kx + w
            ]

    def _bw(g):
        if kernels.requires_grad:
            gk = np.empty_like(kernels.data)
            for ky in range(k):
                for kx in range(k):
                    gk[:, ky, kx] = np.einsum(
                        "nchw,nchw->c", g, xp[:, :, ky : ky + h, kx : kx + w]
                    )
            _accumulate(kernels, gk)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for ky in range(k):
                for kx in range(k):
                    gxp[:, :, ky : ky + h, kx : kx + w] += (
                        kernels.data[:, ky, kx][None, :, None, None] * g
                    )
            gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
            _accumulate(x, np.ascontiguousarray(gx))

    return _result(out, (x, kernels), _bw)


# ---------------------------------------------------------------------------
# channel plumbing


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; ``a`` occupies the leading block."""
    _check_nchw(a, "concat_channels")
    _check_nchw(b, "concat_channels")
    if a.data.shape[0] != b.data.shape[0]:
        raise ValueError(
            f"concat_channels: batch mismatch {a.data.shape[0]} vs {b.data.shape[0]}"
        )
    if a.data.shape[2:] != b.data.shape[2:]:
        raise ValueError(
            f"concat_channels: spatial mismatch {a.data.shape[2:]} vs {b.data.shape[2:]}"
        )
    ca = a.data.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, np.ascontiguousarray(g[:, :ca]))
        if b.requires_grad:
            _accumulate(b, np.ascontiguousarray(g[:, ca:]))

    return _result(out, (a, b), _bw)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check_nchw(x, "slice_channels")
    c = x.data.shape[1]
    if not (0 <= start < stop <= c):
        raise ValueError(f"slice_channels: bad range [{start}, {stop}) for c={c}")
    out = np.ascontiguousarray(x.data[:, start:stop])

    def _bw(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        _accumulate(x, gx)

    return _result(out, (x,), _bw)


def gather_channels(x: Tensor, index) -> Tensor:
    """Reorder channels: ``out[:, j] = x[:, index[j]]``; duplicates allowed."""
    _check_nchw(x, "gather_channels")
    idx = np.asarray(index, dtype=np.intp)
    c = x.data.shape[1]
    if idx.ndim != 1 or idx.size == 0 or idx.min() < 0 or idx.max() >= c:
        raise ValueError(f"gather_channels: bad index for c={c}")
    out = np.ascontiguousarray(x.data[:, idx])

    def _bw(g):
        gx_t = np.zeros((c,) + x.data.shape[:1] + x.data.shape[2:], dtype=g.dtype)
        np.add.at(gx_t, idx, np.moveaxis(g, 1, 0))
        _accumulate(x, np.ascontiguousarray(np.moveaxis(gx_t, 0, 1)))

    return _result(out, (x,), _bw)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space: (n, c, h, w) -> (n, c/r^2, h*r, w*r).

    out[n, c, y, x] = in[n, c*r^2 + (y mod r)*r + (x mod r), y//r, x//r].
    """
    _check_nchw(x, "pixel_shuffle")
    n, c, h, w = x.data.shape
    if r < 1:
        raise ValueError(f"pixel_shuffle: upscale factor must be >= 1, got {r}")
    if c % (r * r) != 0:
        raise ValueError(f"pixel_shuffle: channels {c} not divisible by r^2={r * r}")
    co = c // (r * r)
    view = x.data.reshape(n, co, r, r, h, w)
    out = np.ascontiguousarray(view.transpose(0, 1, 4, 2, 5, 3)).reshape(
        n, co, h * r, w * r
    )

    def _bw(g):
        gv = g.reshape(n, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4)
        _accumulate(x, np.ascontiguousarray(gv).reshape(n, c, h, w))

    return _result(out, (x,), _bw)


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def _bw(g):
        _accumulate(x, g * mask)

    return _result(out, (x,), _bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _result(out, (a, b), _bw)


def scalar_mul(x: Tensor, k: float) -> Tensor:
    kk = x.data.dtype.type(k)
    out = x.data * kk

    def _bw(g):
        _accumulate(x, g * kk)

    return _result(out, (x,), _bw)


def shift_channels(x: Tensor, offsets, max_offset: int | None = None) -> Tensor:
    """Translate every channel plane by its own integer offset, zero filling.

    ``offsets`` is a (c, 2) array of (dy, dx): out[y, x] = in[y+dy, x+dx]
    where the source is in bounds, 0 elsewhere.
    """
    _check_nchw(x, "shift_channels")
    offs = np.asarray(offsets, dtype=int)
    n, c, h, w = x.data.shape
    if offs.shape != (c, 2):
        raise ValueError(f"shift_channels: offsets must be ({c}, 2), got {offs.shape}")
    if max_offset is not None and np.abs(offs).max() > max_offset:
        raise ValueError(
            f"shift_channels: offset magnitude exceeds max_offset={max_offset}"
        )
    out = shift_nchw(x.data, offs)

    def _bw(g):
        _accumulate(x, shift_nchw(g, -offs))

    return _result(out, (x,), _bw)


def shift_nchw(data: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Raw per-channel shift on an NCHW array (the zero-FLOP inference kernel)."""
    n, c, h, w = data.shape
    out = np.zeros_like(data)
    for ch in range(c):
        dy, dx = int(offsets[ch, 0]), int(offsets[ch, 1])
        y0, y1 = max(0, -dy), min(h, h - dy)
        x0, x1 = max(0, -dx), min(w, w - dx)
        if y0 < y1 and x0 < x1:
            out[:, ch, y0:y1, x0:x1] = data[:, ch, y0 + dy : y1 + dy, x0 + dx : x1 + dx]
    return out


# ---------------------------------------------------------------------------
# shift-training support


def stack_grids(tensors) -> Tensor:
    """Stack k equally shaped (m, m) tensors into (k, m, m)."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("stack_grids: need at least one tensor")
    shape = tensors[0].data.shape
    for t in tensors:
        if t.data.shape != shape:
            raise ValueError("stack_grids: all tensors must share one shape")
    out = np.stack([t.data for t in tensors])

    def _bw(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                _accumulate(t, g[i])

    return _result(out, tuple(tensors), _bw)


def grid_softmax(x: Tensor) -> Tensor:
    """Softmax over the trailing two axes (each (m, m) grid sums to 1).

    Numerically stabilized by subtracting the per-grid maximum.
    """
    z = x.data - x.data.max(axis=(-2, -1), keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=(-2, -1), keepdims=True)

    def _bw(g):
        dot = (g * s).sum(axis=(-2, -1), keepdims=True)
        _accumulate(x, (g - dot) * s)

    return _result(s, (x,), _bw)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward the hard values, backpropagate as if the output were ``soft``."""
    if hard.shape != soft.data.shape:
        raise ValueError(
            f"straight_through: shape mismatch {hard.shape} vs {soft.data.shape}"
        )
    out = np.asarray(hard, dtype=soft.data.dtype)

    def _bw(g):
        _accumulate(soft, g)

    return _result(out, (soft,), _bw)


# ---------------------------------------------------------------------------
# reductions and losses


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def _bw(g):
        _accumulate(x, np.full_like(x.data, g))

    return _result(out, (x,), _bw)


def weighted_sum(x: Tensor, coeffs: np.ndarray) -> Tensor:
    """sum(x * coeffs) for a fixed coefficient array (linear readout for tests)."""
    if coeffs.shape != x.data.shape:
        raise ValueError("weighted_sum: coefficient shape mismatch")
    out = np.asarray((x.data * coeffs).sum(), dtype=x.data.dtype)

    def _bw(g):
        _accumulate(x, g * coeffs.astype(x.data.dtype))

    return _result(out, (x,), _bw)


def l1_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean absolute error against a constant target."""
    if target.shape != pred.data.shape:
        raise ValueError(
            f"l1_loss: target shape {target.shape} != pred shape {pred.data.shape}"
        )
    diff = pred.data - target
    out = np.asarray(np.abs(diff).mean(), dtype=pred.data.dtype)
    inv_n = 1.0 / diff.size

    def _bw(g):
        _accumulate(pred, g * np.sign(diff) * pred.data.dtype.type(inv_n))

    return _result(out, (pred,), _bw)


def l2_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error against a constant target."""
    if target.shape != pred.data.shape:
        raise ValueError(
            f"l2_loss: target shape {target.shape} != pred shape {pred.data.shape}"
        )
    diff = pred.data - target
    out = np.asarray((diff * diff).mean(), dtype=pred.data.dtype)
    scale = 2.0 / diff.size

    def _bw(g):
        _accumulate(pred, g * diff * pred.data.dtype.type(scale))

    return _result(out, (pred,), _bw)
