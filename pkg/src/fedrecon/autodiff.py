"""Dense real-tensor arithmetic with reverse-mode differentiation.

Tensors wrap float64 numpy arrays and record a computation DAG through
closures; ``backward`` walks the DAG once in reverse topological order and
returns a gradient map for the requested parameters.  Ops cover what the
reconstruction network and the training losses need: broadcasting
elementwise arithmetic, reductions, 2-D same-size convolution with
dilation, channel/global pooling, and centered orthonormal Fourier
transforms on stacked real/imaginary channel pairs.

Tensor data is treated as immutable once produced by an op; optimizers
update parameter ``.data`` in place only between graph constructions.
"""

from __future__ import annotations

import enum

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op's contract."""


class PartitionTag(enum.Enum):
    GLOBAL_SHARED = "global_shared"
    LOCAL_PERSONALIZED = "local_personalized"


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (evaluation passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Parameter(Tensor):
    """Named, trainable tensor carrying a federation partition tag."""

    __slots__ = ("name", "tag")

    def __init__(self, data, name, tag=PartitionTag.GLOBAL_SHARED):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.tag = tag

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, tag={self.tag.name})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out_data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out_data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(out_data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _make(out_data, (a, b), backward)


def square(a):
    a = as_tensor(a)
    out_data = a.data * a.data

    def backward(g):
        return (2.0 * a.data * g,)

    return _make(out_data, (a,), backward)


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        return (g * (0.5 / out_data),)

    return _make(out_data, (a,), backward)


def relu(a):
    """Elementwise max(0, x); subgradient at 0 is defined as 0."""
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        return (g * (a.data > 0.0),)

    return _make(out_data, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    out_data = np.empty_like(a.data)
    pos = a.data >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out_data[~pos] = e / (1.0 + e)

    def backward(g):
        return (g * out_data * (1.0 - out_data),)

    return _make(out_data, (a,), backward)


def softplus(a):
    """log(1 + e^x), numerically stable; derivative is the sigmoid."""
    a = as_tensor(a)
    out_data = np.logaddexp(0.0, a.data)

    def backward(g):
        return (g / (1.0 + np.exp(-a.data)),)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and structure


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g2 = g
        if not keepdims:
            g2 = np.expand_dims(g2, axis)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    return _make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[i] for i in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out_data, tuple(tensors), backward)


def reshape(a, shape):
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.data.shape),)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# pooling


def channel_pool(a, mode):
    """Pool across the channel axis of a (..., C, H, W) tensor -> (..., 1, H, W)."""
    a = as_tensor(a)
    if mode == "avg":
        out_data = a.data.mean(axis=-3, keepdims=True)

        def backward(g):
            c = a.data.shape[-3]
            return (np.broadcast_to(g / c, a.data.shape).copy(),)

    elif mode == "max":
        out_data = a.data.max(axis=-3, keepdims=True)

        def backward(g):
            hit = a.data == out_data
            counts = hit.sum(axis=-3, keepdims=True)
            return (g / counts * hit,)

    else:
        raise ValueError(f"unknown pooling mode: {mode!r}")
    return _make(out_data, (a,), backward)


def global_pool(a, mode):
    """Pool over the spatial axes of a (..., C, H, W) tensor -> (..., C, 1, 1)."""
    a = as_tensor(a)
    if mode == "avg":
        out_data = a.data.mean(axis=(-2, -1), keepdims=True)

        def backward(g):
            n = a.data.shape[-2] * a.data.shape[-1]
            return (np.broadcast_to(g / n, a.data.shape).copy(),)

    elif mode == "max":
        out_data = a.data.max(axis=(-2, -1), keepdims=True)

        def backward(g):
            hit = a.data == out_data
            counts = hit.sum(axis=(-2, -1), keepdims=True)
            return (g / counts * hit,)

    else:
        raise ValueError(f"unknown pooling mode: {mode!r}")
    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# convolution


def _pad_same(x, kh, kw, dilation):
    n, ci, h, w = x.shape
    ph = dilation * (kh - 1) // 2
    pw = dilation * (kw - 1) // 2
    xp = np.zeros((n, ci, h + 2 * ph, w + 2 * pw))
    xp[:, :, ph : ph + h, pw : pw + w] = x
    return xp


def _center_only(h, w, kh, kw, dilation):
    # with same zero padding, taps other than the kernel center fall
    # entirely on padding when the dilated footprint exceeds the image
    return dilation >= h and dilation >= w and kh % 2 == 1 and kw % 2 == 1


def _im2col(x, kh, kw, dilation):
    """(N, Ci, H, W) -> (N, Ci*kh*kw, H*W) patch matrix, same zero padding."""
    n, ci, h, w = x.shape
    xp = _pad_same(x, kh, kw, dilation)
    cols = np.empty((n, ci, kh * kw, h, w))
    for i in range(kh):
        for j in range(kw):
            di, dj = i * dilation, j * dilation
            cols[:, :, i * kw + j] = xp[:, :, di : di + h, dj : dj + w]
    return cols.reshape(n, ci * kh * kw, h * w)


def _conv2d_raw(x, k, dilation, cols=None):
    """Same-size cross-correlation via one batched patch-matrix GEMM."""
    n, ci, h, w = x.shape
    co, _, kh, kw = k.shape
    if _center_only(h, w, kh, kw, dilation):
        kc = k[:, :, kh // 2, kw // 2]
        return np.matmul(kc, x.reshape(n, ci, h * w)).reshape(n, co, h, w), None
    if cols is None:
        cols = _im2col(x, kh, kw, dilation)
    out = np.matmul(k.reshape(co, -1), cols)
    return out.reshape(n, co, h, w), cols


def _conv2d_grad_kernel(x, g, kh, kw, dilation, cols):
    """Gradient w.r.t. a (Co, Ci, kh, kw) kernel given input and output grads."""
    n, ci, h, w = x.shape
    co = g.shape[1]
    gm = g.reshape(n, co, h * w)
    if _center_only(h, w, kh, kw, dilation):
        gk = np.zeros((co, ci, kh, kw))
        gk[:, :, kh // 2, kw // 2] = np.matmul(
            gm, x.reshape(n, ci, h * w).transpose(0, 2, 1)
        ).sum(axis=0)
        return gk
    # BLAS takes the transposed patch matrix as a flag, so this batched
    # product plus a small reduction beats a tensordot (which copies)
    return np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(co, ci, kh, kw)


def conv2d(x, kernel, dilation=1, bias=None):
    """Same-size 2-D cross-correlation.

    ``x`` is (C_in, H, W) or (N, C_in, H, W); ``kernel`` is
    (C_out, C_in, k, k) with odd k; zero padding preserves the spatial
    size for any dilation >= 1.  Differentiable w.r.t. input, kernel and
    bias.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    squeezed = x.data.ndim == 3
    xd = x.data[None] if squeezed else x.data
    if xd.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects (N,C,H,W) input and (Co,Ci,k,k) kernel, got "
            f"{x.data.shape} and {kernel.data.shape}"
        )
    co, ci, kh, kw = kernel.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel size must be odd, got {kh}x{kw}")
    if xd.shape[1] != ci:
        raise ShapeError(
            f"conv2d channel mismatch: input has {xd.shape[1]} channels, "
            f"kernel expects {ci}"
        )
    if dilation < 1:
        raise ShapeError(f"conv2d dilation must be >= 1, got {dilation}")

    out_data, cols = _conv2d_raw(xd, kernel.data, dilation)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (co,):
            raise ShapeError(
                f"conv2d bias must have shape ({co},), got {bias.data.shape}"
            )
        out_data = out_data + bias.data[:, None, None]
        parents.append(bias)
    if squeezed:
        out_data = out_data[0]

    def backward(g):
        gd = g[None] if squeezed else g
        if x.requires_grad:
            # grad w.r.t. input: correlate with the spatially-flipped,
            # channel-transposed kernel (stride 1, same padding)
            k_flip = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx, _ = _conv2d_raw(gd, np.ascontiguousarray(k_flip), dilation)
            gx = gx[0] if squeezed else gx
        else:
            gx = 0.0
        gk = _conv2d_grad_kernel(xd, gd, kh, kw, dilation, cols)
        grads = [gx, gk]
        if bias is not None:
            grads.append(gd.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out_data, parents, backward)


# ---------------------------------------------------------------------------
# centered orthonormal Fourier transforms on stacked real/imag channels


def _fft2c(z):
    return np.fft.fftshift(
        np.fft.fft2(np.fft.ifftshift(z, axes=(-2, -1)), norm="ortho"), axes=(-2, -1)
    )


def _ifft2c(z):
    return np.fft.fftshift(
        np.fft.ifft2(np.fft.ifftshift(z, axes=(-2, -1)), norm="ortho"), axes=(-2, -1)
    )


def _pair_to_complex(d):
    return d[..., 0, :, :] + 1j * d[..., 1, :, :]


def _complex_to_pair(z):
    return np.stack([z.real, z.imag], axis=-3)


def fft2c_pair(a):
    """Centered orthonormal 2-D FFT on a (..., 2, H, W) real/imag stack.

    The transform is unitary, so the backward pass is the inverse
    transform applied to the gradient stack.
    """
    a = as_tensor(a)
    out_data = _complex_to_pair(_fft2c(_pair_to_complex(a.data)))

    def backward(g):
        return (_complex_to_pair(_ifft2c(_pair_to_complex(g))),)

    return _make(out_data, (a,), backward)


def ifft2c_pair(a):
    """Centered orthonormal 2-D inverse FFT on a (..., 2, H, W) stack."""
    a = as_tensor(a)
    out_data = _complex_to_pair(_ifft2c(_pair_to_complex(a.data)))

    def backward(g):
        return (_complex_to_pair(_fft2c(_pair_to_complex(g))),)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss, params=None):
    """Reverse-mode gradients of a scalar ``loss``.

    Returns a dict mapping each requested parameter (default: every
    reachable ``Parameter``) to its gradient array; parameters not on any
    path to the loss receive a zero gradient.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    topo = []
    visited = set()
    stack = [(loss, False)]
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

    for node in topo:
        node.grad = None
    loss.grad = np.ones_like(loss.data)

    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + g

    if params is None:
        params = [n for n in topo if isinstance(n, Parameter)]
    return {
        p: (
            p.grad
            if id(p) in visited and p.grad is not None
            else np.zeros_like(p.data)
        )
        for p in params
    }
