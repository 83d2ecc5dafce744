"""Neural-network primitives on :class:`~sdaanet.tensor.Tensor` (NCHW layout)."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .tensor import Tensor


class ShapeError(ValueError):
    """Raised when an input does not match an op's shape contract."""

    def __init__(self, op: str, dim: str, expected, got):
        self.op, self.dim, self.expected, self.got = op, dim, expected, got
        super().__init__(f"{op}: dimension {dim!r} expected {expected}, got {got}")


def _check(op, dim, expected, got):
    if expected != got:
        raise ShapeError(op, dim, expected, got)


# --------------------------------------------------------------- activations
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), bw)


# ------------------------------------------------------------------- linear
def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``y = x @ W.T + b`` for ``x`` of shape (N, Din) and ``W`` of shape (Dout, Din)."""
    if x.ndim != 2:
        raise ShapeError("fully_connected", "input rank", 2, x.ndim)
    _check("fully_connected", "Din", weight.shape[1], x.shape[1])
    if bias is not None:
        _check("fully_connected", "Dout", weight.shape[0], bias.shape[0])
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ wd
        gw = g.T @ xd
        gb = g.sum(axis=0) if bias is not None else None
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, bw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    ``x`` is (N, Cin, H, W), ``weight`` is (Cout, Cin, kh, kw). Output spatial
    size is ``floor((H + 2*padding - kh) / stride) + 1``.
    """
    if x.ndim != 4:
        raise ShapeError("conv2d", "input rank", 4, x.ndim)
    if weight.ndim != 4:
        raise ShapeError("conv2d", "weight rank", 4, weight.ndim)
    if stride < 1:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be non-negative, got {padding}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    _check("conv2d", "Cin", wcin, cin)
    if bias is not None:
        _check("conv2d", "Cout", cout, bias.shape[0])
    if kh > h + 2 * padding:
        raise ShapeError("conv2d", "kh", f"<= {h + 2 * padding}", kh)
    if kw > w + 2 * padding:
        raise ShapeError("conv2d", "kw", f"<= {w + 2 * padding}", kw)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    wd = weight.data
    w2 = wd.reshape(cout, cin * kh * kw)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0

    # columns laid out as (Cin*kh*kw, N*Ho*Wo) so each pass is one GEMM
    xt = x.data.transpose(1, 0, 2, 3)
    if pointwise:
        cols = xt.reshape(cin, n * h * w)
    else:
        xp = np.pad(xt, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xt
        cols6 = np.empty((cin, kh, kw, n, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols6[:, i, j] = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
        cols = cols6.reshape(cin * kh * kw, n * ho * wo)

    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
        gw = (g2 @ cols.T).reshape(wd.shape)
        gb = g2.sum(axis=1) if bias is not None else None
        gx = None
        if x.requires_grad:
            gcols = w2.T @ g2
            if pointwise:
                gx = gcols.reshape(cin, n, h, w).transpose(1, 0, 2, 3)
            else:
                gcols6 = gcols.reshape(cin, kh, kw, n, ho, wo)
                gxp = np.zeros((cin, n, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gcols6[:, i, j]
                gx = gxp[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3)
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, bw)


def group_norm(x: Tensor, weight: Tensor, bias: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalise each sample over channel groups, then scale and shift per channel.

    Statistics never cross the batch dimension.
    """
    if x.ndim != 4:
        raise ShapeError("group_norm", "input rank", 4, x.ndim)
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError("group_norm", "C divisible by groups", 0, c % groups)
    _check("group_norm", "C", c, weight.shape[0])
    xg = x.data.reshape(n, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    centred = xg - mean
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=2, keepdims=True) + eps)
    xhat = (centred * inv_std).reshape(n, c, h, w)
    gamma = weight.data.reshape(1, c, 1, 1)
    out = xhat * gamma + bias.data.reshape(1, c, 1, 1)

    def bw(g):
        gw = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            dxhat = (g * gamma).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            gx = inv_std * (dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(n, c, h, w)
        return (gx, gw, gb)

    return Tensor._make(out, (x, weight, bias), bw)


def default_groups(channels: int) -> int:
    return 8 if channels % 8 == 0 else 1


# --------------------------------------------------------------- resampling
@lru_cache(maxsize=None)
def _pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


@lru_cache(maxsize=None)
def _bilinear_matrix(n_in: int, n_out: int, align_corners: bool) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        if align_corners:
            src = i * (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
        else:
            src = max((i + 0.5) * n_in / n_out - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def _separable(x: Tensor, mh: np.ndarray, mw: np.ndarray) -> Tensor:
    mh = mh.astype(x.dtype)
    mw = mw.astype(x.dtype)
    out = np.matmul(np.matmul(mh, x.data), mw.T)
    return Tensor._make(out, (x,), lambda g: (np.matmul(np.matmul(mh.T, g), mw),))


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average over contiguous windows ``[floor(i*H/o), ceil((i+1)*H/o))``."""
    if x.ndim != 4:
        raise ShapeError("adaptive_avg_pool", "input rank", 4, x.ndim)
    h, w = x.shape[2:]
    if out_h == h and out_w == w:
        return x
    return _separable(x, _pool_matrix(h, out_h), _pool_matrix(w, out_w))


def bilinear_resize(x: Tensor, out_h: int, out_w: int, align_corners: bool = True) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("bilinear_resize", "input rank", 4, x.ndim)
    h, w = x.shape[2:]
    if out_h == h and out_w == w:
        return x
    return _separable(x, _bilinear_matrix(h, out_h, align_corners), _bilinear_matrix(w, out_w, align_corners))


def resize_array(a: np.ndarray, out_h: int, out_w: int, align_corners: bool = True) -> np.ndarray:
    """Bilinear resize of a plain (..., H, W) array; no graph recording."""
    h, w = a.shape[-2:]
    if (h, w) == (out_h, out_w):
        return a
    mh = _bilinear_matrix(h, out_h, align_corners).astype(a.dtype)
    mw = _bilinear_matrix(w, out_w, align_corners).astype(a.dtype)
    return np.matmul(np.matmul(mh, a), mw.T)
