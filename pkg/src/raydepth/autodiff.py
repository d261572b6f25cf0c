"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: eager numpy arithmetic plus a recorded graph.  Every
operation returns a fresh :class:`Tensor`; when gradient recording is
enabled and any input is tracked, the output remembers its inputs and a
closure that maps the output gradient to input gradients.

Gradient accumulation is canonical: during :meth:`Tensor.backward` the
contributions flowing into a node are summed in a fixed order (sorted by
consumer node id and input slot), so any topological processing order
yields bitwise-identical gradients.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from collections import defaultdict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError, ParameterError, TrainingError

LEAKY_SLOPE = 0.01

_grad_enabled = True
_node_ids = itertools.count()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """N-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "op", "nid")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = None  # (inputs tuple, backward closure) when recorded
        self.nid = next(_node_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        """A view of the same values with no graph history."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, shuffle_rng=None):
        """Accumulate gradients of this scalar into every tracked ancestor.

        ``shuffle_rng`` randomizes the processing order among ready nodes;
        the result is bitwise-independent of that order.
        """
        if self.data.size != 1:
            raise ParameterError(
                f"backward() requires a scalar output, got shape {self.shape}"
            )
        nodes = {self.nid: self}
        pending = defaultdict(int)
        stack = [self]
        while stack:
            t = stack.pop()
            if t.op is None:
                continue
            for parent in t.op[0]:
                pending[parent.nid] += 1
                if parent.nid not in nodes:
                    nodes[parent.nid] = parent
                    stack.append(parent)
        contrib = defaultdict(list)
        contrib[self.nid].append((-1, 0, np.ones_like(self.data)))
        ready = [self.nid]
        while ready:
            if shuffle_rng is None:
                nid = ready.pop()
            else:
                nid = ready.pop(int(shuffle_rng.integers(len(ready))))
            node = nodes[nid]
            parts = sorted(contrib.pop(nid, ()), key=lambda e: (e[0], e[1]))
            if not parts:
                continue
            grad = parts[0][2]
            for _, _, extra in parts[1:]:
                grad = grad + extra
            if node.requires_grad:
                node.grad = grad if node.grad is None else node.grad + grad
            if node.op is not None:
                inputs, backward_fn = node.op
                input_grads = backward_fn(grad)
                for slot, (parent, g) in enumerate(zip(inputs, input_grads)):
                    if g is not None:
                        contrib[parent.nid].append((nid, slot, g))
                    pending[parent.nid] -= 1
                    if pending[parent.nid] == 0:
                        ready.append(parent.nid)

    # -- operator sugar -------------------------------------------------

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tracked={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, inputs, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = (tuple(inputs), backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ---------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)
    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)
    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )
    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    def backward(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )
    return _make(a.data / b.data, (a, b), backward)


def texp(x):
    x = as_tensor(x)
    out_data = np.exp(x.data)
    def backward(g):
        return (g * out_data,)
    return _make(out_data, (x,), backward)


def tlog(x):
    x = as_tensor(x)
    def backward(g):
        return (g / x.data,)
    return _make(np.log(x.data), (x,), backward)


def tabs(x):
    x = as_tensor(x)
    sign = np.sign(x.data)
    def backward(g):
        return (g * sign,)
    return _make(np.abs(x.data), (x,), backward)


def leaky_relu(x, slope=LEAKY_SLOPE):
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)
    def backward(g):
        return (g * factor,)
    return _make(x.data * factor, (x,), backward)


def clamp_min(x, lo):
    x = as_tensor(x)
    mask = (x.data > lo).astype(np.float64)
    def backward(g):
        return (g * mask,)
    return _make(np.maximum(x.data, lo), (x,), backward)


# -- reductions -----------------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, x.data.shape).copy(),)
    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        n = np.prod([x.data.shape[a] for a in np.atleast_1d(axis)])
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / n, x.data.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk / n, x.data.shape).copy(),)
    return _make(x.data.mean(axis=axis, keepdims=keepdims), (x,), backward)


def tmax(x, axis, keepdims=False):
    """Maximum along one axis; gradient routes to the first maximal entry."""
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=axis)
    out_data = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out_data = np.squeeze(out_data, axis=axis)
    def backward(g):
        gx = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), gk, axis=axis)
        return (gx,)
    return _make(out_data, (x,), backward)


# -- shape manipulation ----------------------------------------------------


def reshape(x, shape):
    x = as_tensor(x)
    original = x.data.shape
    def backward(g):
        return (g.reshape(original),)
    return _make(x.data.reshape(shape), (x,), backward)


def transpose(x, axes):
    x = as_tensor(x)
    inverse = tuple(np.argsort(axes))
    def backward(g):
        return (np.transpose(g, inverse),)
    return _make(np.transpose(x.data, axes), (x,), backward)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]
    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def getitem(x, key):
    x = as_tensor(x)
    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)
    return _make(x.data[key], (x,), backward)


def tile_leading(x, n):
    """Replicate ``x`` along a new leading axis of extent ``n``."""
    x = as_tensor(x)
    def backward(g):
        return (g.sum(axis=0),)
    return _make(np.broadcast_to(x.data, (n,) + x.data.shape).copy(), (x,), backward)


def edge_pad2d(x, width=1):
    """Replicate-pad the last two axes by ``width`` (only width 1 supported)."""
    if width != 1:
        raise ParameterError("edge_pad2d supports width 1 only")
    x = as_tensor(x)
    pad = [(0, 0)] * (x.data.ndim - 2) + [(1, 1), (1, 1)]
    def backward(g):
        gx = g[..., 1:-1, 1:-1].copy()
        gx[..., 0, :] += g[..., 0, 1:-1]
        gx[..., -1, :] += g[..., -1, 1:-1]
        gx[..., :, 0] += g[..., 1:-1, 0]
        gx[..., :, -1] += g[..., 1:-1, -1]
        gx[..., 0, 0] += g[..., 0, 0]
        gx[..., 0, -1] += g[..., 0, -1]
        gx[..., -1, 0] += g[..., -1, 0]
        gx[..., -1, -1] += g[..., -1, -1]
        return (gx,)
    return _make(np.pad(x.data, pad, mode="edge"), (x,), backward)


# -- linear algebra ---------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner extents disagree: {a.shape} vs {b.shape}"
        )
    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)
    return _make(a.data @ b.data, (a, b), backward)


def softmax_lastdim(x):
    """Stable softmax over the last axis; slices sum to 1."""
    x = as_tensor(x)
    if x.data.shape[-1] < 1:
        raise ParameterError("softmax needs at least one entry on the last axis")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains non-finite values")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)
    return _make(y, (x,), backward)


def weighted_gather(x, indices, weights):
    """``out[n] = sum_k weights[k, n] * x[indices[k, n]]`` over rows of ``x``.

    ``x`` is (M, C); ``indices`` and ``weights`` are (K, N).  The sampling
    pattern is constant; only ``x`` receives a gradient.
    """
    x = as_tensor(x)
    out = np.zeros((indices.shape[1], x.data.shape[1]))
    for k in range(indices.shape[0]):
        out += weights[k][:, None] * x.data[indices[k]]
    def backward(g):
        gx = np.zeros_like(x.data)
        for k in range(indices.shape[0]):
            np.add.at(gx, indices[k], weights[k][:, None] * g)
        return (gx,)
    return _make(out, (x,), backward)


# -- convolutions ------------------------------------------------------------

_einsum_paths = {}


def _einsum(eq, a, b):
    """einsum with the contraction path cached per (equation, shapes)."""
    key = (eq, a.shape, b.shape)
    path = _einsum_paths.get(key)
    if path is None:
        path = np.einsum_path(eq, a, b, optimize="optimal")[0]
        _einsum_paths[key] = path
    return np.einsum(eq, a, b, optimize=path)


def _zpad(x, pads):
    """Zero-pad trailing spatial axes; pads is ((lo, hi), ...) per axis."""
    shape = list(x.shape)
    index = [slice(None)] * x.ndim
    offset = x.ndim - len(pads)
    for i, (lo, hi) in enumerate(pads):
        shape[offset + i] += lo + hi
        index[offset + i] = slice(lo, lo + x.shape[offset + i])
    out = np.zeros(shape)
    out[tuple(index)] = x
    return out


def _check_kernel(kernel, cin, ndim_spatial, name):
    k = kernel.data.shape[2]
    if kernel.data.ndim != 2 + ndim_spatial:
        raise DimensionError(f"{name} kernel must have rank {2 + ndim_spatial}")
    if any(s != k for s in kernel.data.shape[2:]):
        raise DimensionError(f"{name} kernel must be square, got {kernel.shape}")
    if k % 2 != 1:
        raise ParameterError(f"{name} kernel size must be odd, got {k}")
    if kernel.data.shape[1] != cin:
        raise DimensionError(
            f"{name} channel mismatch: input has {cin}, kernel expects {kernel.data.shape[1]}"
        )
    return k


def _dilate_pad(g, strides, in_spatial, k, p):
    """Zero-stuff a strided-conv output grad so a stride-1 full correlation
    with the flipped kernel reproduces the input gradient."""
    c = g.shape[0]
    shape = [c]
    inserts = []
    for n_in, s, n_out in zip(in_spatial, strides, g.shape[1:]):
        extra = (n_in + 2 * p - k) - s * (n_out - 1)
        lo = k - 1 - p
        shape.append(lo + s * (n_out - 1) + 1 + lo + extra)
        inserts.append((lo, s))
    out = np.zeros(shape)
    slices = tuple(
        slice(lo, lo + s * (n - 1) + 1, s)
        for (lo, s), n in zip(inserts, g.shape[1:])
    )
    out[(slice(None),) + slices] = g
    return out


def conv3d(x, kernel, bias, stride=1):
    """3-D cross-correlation over a (Cin, D, H, W) volume, zero padding
    (k-1)/2, per-axis stride 1 or 2."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.data.ndim != 4:
        raise DimensionError(f"conv3d input must be (Cin, D, H, W), got {x.shape}")
    k = _check_kernel(kernel, x.data.shape[0], 3, "conv3d")
    cout = kernel.data.shape[0]
    if bias.data.shape != (cout,):
        raise DimensionError(f"conv3d bias must be ({cout},), got {bias.shape}")
    strides = (stride,) * 3 if isinstance(stride, int) else tuple(stride)
    p = k // 2
    xp = _zpad(x.data, ((p, p), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    win = win[:, :: strides[0], :: strides[1], :: strides[2]]
    out = _einsum("oiabc,idhwabc->odhw", kernel.data, win)
    out += bias.data[:, None, None, None]
    in_spatial = x.data.shape[1:]

    def backward(g):
        gk = _einsum("odhw,idhwabc->oiabc", g, win)
        gb = g.sum(axis=(1, 2, 3))
        gd = _dilate_pad(g, strides, in_spatial, k, p)
        kf = np.ascontiguousarray(kernel.data[:, :, ::-1, ::-1, ::-1].swapaxes(0, 1))
        gwin = sliding_window_view(gd, (k, k, k), axis=(1, 2, 3))
        gx = _einsum("oiabc,idhwabc->odhw", kf, gwin)
        return gx, gk, gb

    return _make(out, (x, kernel, bias), backward)


def conv2d(x, kernel, bias, stride=1):
    """2-D cross-correlation over a (Cin, H, W) image, zero padding (k-1)/2."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.data.ndim != 3:
        raise DimensionError(f"conv2d input must be (Cin, H, W), got {x.shape}")
    k = _check_kernel(kernel, x.data.shape[0], 2, "conv2d")
    cout = kernel.data.shape[0]
    if bias.data.shape != (cout,):
        raise DimensionError(f"conv2d bias must be ({cout},), got {bias.shape}")
    strides = (stride,) * 2 if isinstance(stride, int) else tuple(stride)
    p = k // 2
    xp = _zpad(x.data, ((p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, :: strides[0], :: strides[1]]
    out = _einsum("oiab,ihwab->ohw", kernel.data, win)
    out += bias.data[:, None, None]
    in_spatial = x.data.shape[1:]

    def backward(g):
        gk = _einsum("ohw,ihwab->oiab", g, win)
        gb = g.sum(axis=(1, 2))
        gd = _dilate_pad(g, strides, in_spatial, k, p)
        kf = np.ascontiguousarray(kernel.data[:, :, ::-1, ::-1].swapaxes(0, 1))
        gwin = sliding_window_view(gd, (k, k), axis=(1, 2))
        gx = _einsum("oiab,ihwab->ohw", kf, gwin)
        return gx, gk, gb

    return _make(out, (x, kernel, bias), backward)


def conv_transpose3d(x, kernel, bias, stride=(1, 2, 2)):
    """Transposed 3-D convolution with kernel extents equal to the stride,
    so each axis is upsampled exactly by its stride factor."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.data.ndim != 4:
        raise DimensionError(f"conv_transpose3d input must be rank 4, got {x.shape}")
    s = tuple(stride)
    cin, d, h, w = x.data.shape
    if kernel.data.ndim != 5 or kernel.data.shape[0] != cin or kernel.data.shape[2:] != s:
        raise DimensionError(
            f"conv_transpose3d kernel must be (Cin, Cout, {s[0]}, {s[1]}, {s[2]}), got {kernel.shape}"
        )
    cout = kernel.data.shape[1]
    if bias.data.shape != (cout,):
        raise DimensionError(f"conv_transpose3d bias must be ({cout},), got {bias.shape}")
    out = _einsum("idhw,ioabc->odahbwc", x.data, kernel.data)
    out = out.reshape(cout, d * s[0], h * s[1], w * s[2])
    out = out + bias.data[:, None, None, None]

    def backward(g):
        gr = g.reshape(cout, d, s[0], h, s[1], w, s[2])
        gx = _einsum("odahbwc,ioabc->idhw", gr, kernel.data)
        gk = _einsum("odahbwc,idhw->ioabc", gr, x.data)
        gb = g.sum(axis=(1, 2, 3))
        return gx, gk, gb

    return _make(out, (x, kernel, bias), backward)


def avg_pool2d(x, factor):
    """Non-overlapping mean pooling of the last two axes by ``factor``."""
    x = as_tensor(x)
    f = int(factor)
    if f == 1:
        return x
    *lead, h, w = x.data.shape
    if h % f or w % f:
        raise DimensionError(f"avg_pool2d extents {h}x{w} not divisible by {f}")
    blocks = x.data.reshape(*lead, h // f, f, w // f, f)
    out = blocks.mean(axis=(-3, -1))
    def backward(g):
        gb = np.broadcast_to(
            g[..., :, None, :, None] / (f * f), (*lead, h // f, f, w // f, f)
        )
        return (gb.reshape(x.data.shape).copy(),)
    return _make(out, (x,), backward)


def upsample_nearest2d(x, factor):
    """Nearest-neighbor upsampling of the last two axes by ``factor``."""
    x = as_tensor(x)
    f = int(factor)
    if f == 1:
        return x
    out = np.repeat(np.repeat(x.data, f, axis=-2), f, axis=-1)
    *lead, h, w = x.data.shape
    def backward(g):
        return (g.reshape(*lead, h, f, w, f).sum(axis=(-3, -1)),)
    return _make(out, (x,), backward)


# -- parameters and verification ---------------------------------------------


class ParameterStore:
    """Named, deterministically ordered collection of tracked tensors."""

    def __init__(self):
        self._params = {}

    def add(self, path, value):
        if path in self._params:
            raise ParameterError(f"duplicate parameter path {path!r}")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        self._params[path] = t
        return t

    def __getitem__(self, path):
        return self._params[path]

    def __contains__(self, path):
        return path in self._params

    def __len__(self):
        return len(self._params)

    def paths(self):
        return sorted(self._params)

    def items(self):
        for path in self.paths():
            yield path, self._params[path]

    def zero_grad(self):
        for _, p in self.items():
            p.grad = None

    def total_entries(self):
        return sum(p.data.size for _, p in self.items())


def uniform_init(rng, shape, fan_in, fan_out):
    """Deterministic seeded init: uniform in +-sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def gradient_check_report(f, params, step=1e-5):
    """Per-parameter max relative error between reverse-mode gradients and
    central finite differences of ``f(params)``."""
    if not (1e-7 <= step <= 1e-3):
        raise ParameterError(f"finite-difference step {step} outside [1e-7, 1e-3]")
    params.zero_grad()
    out = f(params)
    if not np.isfinite(out.data).all():
        raise NumericError("function value is non-finite at the base point")
    out.backward()
    analytic = {
        path: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        for path, p in params.items()
    }
    report = {}
    with no_grad():
        for path, p in params.items():
            flat = p.data.reshape(-1)
            ga = analytic[path].reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + step
                f_plus = float(f(params).data)
                flat[i] = saved - step
                f_minus = float(f(params).data)
                flat[i] = saved
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NumericError(f"non-finite value while probing {path}[{i}]")
                g_fd = (f_plus - f_minus) / (2.0 * step)
                rel = abs(ga[i] - g_fd) / max(1.0, abs(ga[i]), abs(g_fd))
                worst = max(worst, rel)
            report[path] = worst
    return report


def gradient_check(f, params, step=1e-5):
    """Maximum relative error over every parameter entry (see report variant)."""
    report = gradient_check_report(f, params, step=step)
    return max(report.values()) if report else 0.0
