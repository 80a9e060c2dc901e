"""Valid (unpadded) convolution, max-pooling and transpose convolution, NHWC.

Kernels are stored as ``w[a, b, c, k]`` (rows, cols, in-channel, filter).
The convolution applies the kernel flipped, ``z[i,j,k] = sum w[a,b,c,k] *
x[S*i + n-1-a, S*j + n-1-b, c] + bias[k]``; since weights are learned the
flip is absorbed in training.  The transpose convolution with the same
``(n, S)`` is its exact adjoint.
"""
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class LayerDimError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str                 # "conv" | "maxpool" | "tconv"
    kernel: int
    stride: int
    filters: int = 0          # ignored for maxpool
    activation: str = "none"  # "relu" | "tanh" | "none"
    padding: int = 0

    def __post_init__(self):
        if self.kind not in ("conv", "maxpool", "tconv"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.padding != 0:
            raise ValueError("layers are unpadded")
        if self.kind == "conv" and self.stride > self.kernel:
            raise ValueError("conv stride must not exceed the kernel size")

    def out_size(self, n_in, name="layer"):
        n, s = self.kernel, self.stride
        if self.kind == "tconv":
            n_out = (n_in - 1) * s + n - 2 * self.padding
        else:
            span = n_in - n + 2 * self.padding
            if span < 0 or span % s:
                raise LayerDimError(
                    f"{name}: input {n_in} incompatible with kernel {n}, stride {s}")
            n_out = span // s + 1
        if n_out <= 0:
            raise LayerDimError(f"{name}: non-positive output size {n_out}")
        return n_out

    def to_dict(self):
        return asdict(self)


def conv_out(n_in, n, stride, padding=0):
    return LayerSpec("conv", n, stride, 1, padding=padding).out_size(n_in)


def maxpool_out(n_in, m, stride, padding=0):
    return LayerSpec("maxpool", m, stride, padding=padding).out_size(n_in)


def tconv_out(n_in, n, stride, padding=0):
    return LayerSpec("tconv", n, stride, 1, padding=padding).out_size(n_in)


def _windows(x, n, s):
    """(N, Ho, Wo, C, n, n) strided view of valid windows."""
    return sliding_window_view(x, (n, n), axis=(1, 2))[:, ::s, ::s]


def _check(x, spec, w, name):
    if x.ndim != 4:
        raise LayerDimError(f"{name}: expected NHWC input, got shape {x.shape}")
    spec.out_size(x.shape[1], name)
    spec.out_size(x.shape[2], name)
    if w is not None and w.shape[2] != x.shape[3]:
        raise LayerDimError(f"{name}: kernel expects {w.shape[2]} channels, input has {x.shape[3]}")


# --- convolution ---------------------------------------------------------------

def conv2d(x, w, b, stride, name="conv"):
    n = w.shape[0]
    _check(x, LayerSpec("conv", n, stride, w.shape[3]), w, name)
    wf = w[::-1, ::-1]
    z = np.tensordot(_windows(x, n, stride), wf.transpose(2, 0, 1, 3), axes=([3, 4, 5], [0, 1, 2]))
    return z + b


def conv2d_backward(x, w, stride, dz, need_dx=True):
    n = w.shape[0]
    wf = w[::-1, ::-1]
    dwf = np.tensordot(_windows(x, n, stride), dz, axes=([0, 1, 2], [0, 1, 2]))  # (C, n, n, K)
    dw = dwf.transpose(1, 2, 0, 3)[::-1, ::-1]
    db = dz.sum(axis=(0, 1, 2))
    dx = None
    if need_dx:
        dx = np.zeros_like(x)
        ho, wo = dz.shape[1], dz.shape[2]
        for a in range(n):
            for c in range(n):
                dx[:, a:a + stride * ho:stride, c:c + stride * wo:stride] += dz @ wf[a, c].T
    return dx, np.ascontiguousarray(dw), db


# --- transpose convolution -------------------------------------------------------

def tconv2d(y, w, b, stride, name="tconv"):
    n = w.shape[0]
    _check(y, LayerSpec("tconv", n, stride, w.shape[3]), w, name)
    wf = w[::-1, ::-1]
    cols = np.tensordot(y, wf, axes=([3], [2]))  # (N, Hi, Wi, n, n, K)
    nb, hi, wi = y.shape[:3]
    out = np.zeros((nb, (hi - 1) * stride + n, (wi - 1) * stride + n, w.shape[3]), dtype=cols.dtype)
    for a in range(n):
        for c in range(n):
            out[:, a:a + stride * hi:stride, c:c + stride * wi:stride] += cols[:, :, :, a, c]
    return out + b


def tconv2d_backward(y, w, stride, dout, need_dy=True):
    n = w.shape[0]
    wf = w[::-1, ::-1]
    win = _windows(dout, n, stride)  # (N, Hi, Wi, K, n, n)
    dwf = np.tensordot(y, win, axes=([0, 1, 2], [0, 1, 2]))  # (C, K, n, n)
    dw = dwf.transpose(2, 3, 0, 1)[::-1, ::-1]
    db = dout.sum(axis=(0, 1, 2))
    dy = None
    if need_dy:
        dy = np.tensordot(win, wf, axes=([3, 4, 5], [3, 0, 1]))
    return dy, np.ascontiguousarray(dw), db


# --- max pooling --------------------------------------------------------------------

def maxpool2d(x, m, stride, name="maxpool"):
    """Window maxima and the flat in-window argmax (first hit in row-major order)."""
    _check(x, LayerSpec("maxpool", m, stride), None, name)
    win = _windows(x, m, stride)
    flat = win.reshape(win.shape[:4] + (m * m,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2d_backward(x_shape, m, stride, arg, dout):
    dx = np.zeros(x_shape, dtype=dout.dtype)
    ho, wo = dout.shape[1], dout.shape[2]
    for a in range(m):
        for c in range(m):
            hit = np.where(arg == a * m + c, dout, 0)
            dx[:, a:a + stride * ho:stride, c:c + stride * wo:stride] += hit
    return dx


# --- activations ----------------------------------------------------------------------

def activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def activation_grad(z, a, kind, da):
    if kind == "relu":
        return da * (z > 0)
    if kind == "tanh":
        return da * (1 - a * a)
    return da


def conv_forward(x, spec, w, b):
    return activate(conv2d(x, w, b, spec.stride), spec.activation)


def maxpool_forward(x, spec):
    return maxpool2d(x, spec.kernel, spec.stride)


def tconv_forward(x, spec, w, b):
    return activate(tconv2d(x, w, b, spec.stride), spec.activation)
