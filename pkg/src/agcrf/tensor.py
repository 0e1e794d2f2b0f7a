"""Dense float64 tensors with a reverse-mode differentiation tape.

Values are numpy arrays of rank up to 4. Image tensors are channel-major
(C, H, W) with an optional leading batch axis (B, C, H, W). Convolution
uses the cross-correlation convention (no kernel flip).

Recording happens only inside a ``with Tape():`` block; outside of one,
every operation runs eagerly and keeps no graph, which is what inference
paths use. Nodes are appended to the tape in creation order, so the list
itself is a topological order and the backward pass simply walks it in
reverse.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "parameter",
    "conv2d",
    "deconv2d",
    "maxpool2d",
    "concat_channels",
    "sigmoid",
    "relu",
]

_ACTIVE_TAPE = None


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss):
        """Seed d(loss)/d(loss) = 1 and sweep the tape in reverse order."""
        if loss.data.size != 1:
            raise ValueError("backward() needs a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "_backward", "name")

    def __init__(self, data, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim > 4:
            raise ValueError(f"rank {self.data.ndim} > 4 not supported")
        self.grad = None
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    # -- arithmetic sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def reshape(self, shape):
        return reshape(self, shape)


def parameter(data, name=None):
    """A leaf tensor meant to be trained (owns a persistent grad buffer)."""
    return Tensor(np.array(data, dtype=np.float64), name=name)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _accum(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _node(data, backward_fn):
    out = Tensor(data)
    if _ACTIVE_TAPE is not None:
        out._backward = backward_fn
        _ACTIVE_TAPE.nodes.append(out)
    return out


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------


def add(a, b):
    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, bwd)


def sub(a, b):
    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, bwd)


def mul(a, b):
    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, bwd)


def div(a, b):
    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(a.data / b.data, bwd)


def scale(a, c):
    c = float(c)

    def bwd(g):
        _accum(a, g * c)

    return _node(a.data * c, bwd)


def add_scalar(a, c):
    c = float(c)

    def bwd(g):
        _accum(a, g)

    return _node(a.data + c, bwd)


def sigmoid(a):
    # stable both tails: exp never overflows
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        _accum(a, g * out * (1.0 - out))

    return _node(out, bwd)


def relu(a):
    mask = a.data > 0

    def bwd(g):
        _accum(a, g * mask)

    return _node(a.data * mask, bwd)


def sum_all(a):
    def bwd(g):
        _accum(a, np.full_like(a.data, float(g)))

    return _node(np.asarray(a.data.sum()), bwd)


def mean_all(a):
    n = a.data.size

    def bwd(g):
        _accum(a, np.full_like(a.data, float(g) / n))

    return _node(np.asarray(a.data.mean()), bwd)


def mean_axis0(a):
    n = a.data.shape[0]

    def bwd(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape).copy())

    return _node(a.data.mean(axis=0), bwd)


def spatial_mean(a):
    """Mean over the trailing H, W axes: (..., C, H, W) -> (..., C)."""
    n = a.data.shape[-1] * a.data.shape[-2]

    def bwd(g):
        _accum(a, np.broadcast_to(np.expand_dims(g, (-1, -2)) / n, a.data.shape).copy())

    return _node(a.data.mean(axis=(-1, -2)), bwd)


def reshape(a, shape):
    shape = tuple(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), bwd)


def channel_sum(a):
    """Sum over the channel axis, keeping it as size 1."""
    axis = 0 if a.data.ndim == 3 else 1

    def bwd(g):
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _node(a.data.sum(axis=axis, keepdims=True), bwd)


def clip(a, lo, hi):
    """Clamp values into [lo, hi]; the gradient is zero where the clamp binds."""
    mask = (a.data > lo) & (a.data < hi)

    def bwd(g):
        _accum(a, g * mask)

    return _node(np.clip(a.data, lo, hi), bwd)


def concat_channels(tensors):
    """Concatenate along the channel axis (axis 0 for CHW, 1 for BCHW)."""
    nd = tensors[0].data.ndim
    axis = 0 if nd == 3 else 1
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * nd
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _node(np.concatenate([t.data for t in tensors], axis=axis), bwd)


# -- convolution ---------------------------------------------------------


def _as_batched(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected CHW or BCHW input, got rank {x.ndim}")


def _conv_out_size(h, k, stride, pad):
    num = h + 2 * pad - k
    if num < 0 or num % stride != 0:
        raise ValueError(f"conv geometry not exact: size {h}, kernel {k}, stride {stride}, pad {pad}")
    return num // stride + 1


def _im2col(x, k, stride, pad):
    """(B,C,H,W) -> patches (B, OH, OW, C*k*k), zero padded."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # B,C,H',W',k,k
    win = win[:, :, ::stride, ::stride]
    b, c, oh, ow = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, oh, ow, c * k * k)


def _col2im(cols, x_shape, k, stride, pad):
    """Adjoint of _im2col: scatter-add patches back onto the input grid."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh, ow = cols.shape[1], cols.shape[2]
    out = np.zeros((b, c, hp, wp))
    cols = cols.reshape(b, oh, ow, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + oh * stride : stride, kj : kj + ow * stride : stride] += cols[:, :, :, :, ki, kj]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return out


def _conv_fwd(x, kern, stride, pad):
    b, c_in, h, w = x.shape
    c_out, c_k = kern.shape[0], kern.shape[1]
    if c_k != c_in:
        raise ValueError(f"kernel expects {c_k} input channels, got {c_in}")
    k = kern.shape[2]
    oh = _conv_out_size(h, k, stride, pad)
    ow = _conv_out_size(w, k, stride, pad)
    cols = _im2col(x, k, stride, pad)
    out = cols.reshape(-1, c_in * k * k) @ kern.reshape(c_out, -1).T
    return out.reshape(b, oh, ow, c_out).transpose(0, 3, 1, 2), cols


def _conv_bwd_input(gy, kern, stride, pad, x_shape):
    b = gy.shape[0]
    c_out = kern.shape[0]
    k = kern.shape[2]
    gcols = gy.transpose(0, 2, 3, 1).reshape(-1, c_out) @ kern.reshape(c_out, -1)
    gcols = gcols.reshape(b, gy.shape[2], gy.shape[3], -1)
    return _col2im(gcols, x_shape, k, stride, pad)


def _conv_bwd_kernel(cols, gy, kern_shape):
    c_out = kern_shape[0]
    gk = gy.transpose(0, 2, 3, 1).reshape(-1, c_out).T @ cols.reshape(-1, cols.shape[-1])
    return gk.reshape(kern_shape)


def conv2d(x, kern, stride=1, pad=0):
    """2-D cross-correlation. x: (C_in,H,W) or (B,C_in,H,W); kern: (C_out,C_in,k,k).

    Output size per axis is (H + 2*pad - k) / stride + 1 and must divide
    exactly. The kernel is applied unflipped.
    """
    if kern.data.shape[2] != kern.data.shape[3] or kern.data.shape[2] % 2 == 0:
        raise ValueError("kernel must be square with odd size")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    xb, squeezed = _as_batched(x.data)
    out, cols = _conv_fwd(xb, kern.data, stride, pad)
    x_shape = xb.shape

    def bwd(g):
        gb = g[None] if squeezed else g
        gi = _conv_bwd_input(gb, kern.data, stride, pad, x_shape)
        _accum(x, gi[0] if squeezed else gi)
        _accum(kern, _conv_bwd_kernel(cols, gb, kern.data.shape))

    return _node(out[0] if squeezed else out, bwd)


def deconv2d(x, kern, stride=1, pad=0):
    """Transposed convolution, the adjoint of conv2d with the same kernel.

    x: (C_a,H,W) or batched; kern: (C_a,C_b,k,k) where the first kernel
    axis matches the input channels. Output is (C_b, H', W') with
    H' = (H-1)*stride - 2*pad + k. For every conforming x, y:
    <conv2d(x,K), y> == <x, deconv2d(y,K)>.
    """
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    xb, squeezed = _as_batched(x.data)
    c_a, c_b, k = kern.data.shape[0], kern.data.shape[1], kern.data.shape[2]
    if xb.shape[1] != c_a:
        raise ValueError(f"kernel expects {c_a} input channels, got {xb.shape[1]}")
    h, w = xb.shape[2], xb.shape[3]
    oh = (h - 1) * stride - 2 * pad + k
    ow = (w - 1) * stride - 2 * pad + k
    if oh < 1 or ow < 1:
        raise ValueError("deconv geometry yields empty output")
    out_shape = (xb.shape[0], c_b, oh, ow)
    out = _conv_bwd_input(xb, kern.data, stride, pad, out_shape)

    def bwd(g):
        gb = g[None] if squeezed else g
        gx, cols = _conv_fwd(gb, kern.data, stride, pad)
        _accum(x, gx[0] if squeezed else gx)
        _accum(kern, _conv_bwd_kernel(cols, xb, kern.data.shape))

    return _node(out[0] if squeezed else out, bwd)


def maxpool2d(x, k, stride):
    """Max pooling with retained argmax indices; ties go to the smallest
    linear index inside the window (numpy argmax convention)."""
    xb, squeezed = _as_batched(x.data)
    b, c, h, w = xb.shape
    oh = _conv_out_size(h, k, stride, 0)
    ow = _conv_out_size(w, k, stride, 0)
    win = sliding_window_view(xb, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    patches = win.reshape(b, c, oh, ow, k * k)
    arg = patches.argmax(axis=-1)
    out = np.take_along_axis(patches, arg[..., None], axis=-1)[..., 0]

    # flat indices into the (padded-free) input, for the backward scatter
    oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    iy = oy[None, None] * stride + arg // k
    ix = ox[None, None] * stride + arg % k
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    flat = ((bi * c + ci) * h + iy) * w + ix

    def bwd(g):
        gb = g[None] if squeezed else g
        gx = np.zeros(b * c * h * w)
        np.add.at(gx, flat.ravel(), gb.ravel())
        gx = gx.reshape(b, c, h, w)
        _accum(x, gx[0] if squeezed else gx)

    out_t = _node(out[0] if squeezed else out, bwd)
    idx = flat[0] if squeezed else flat
    return out_t, idx
