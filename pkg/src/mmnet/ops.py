"""Differentiable array ops for 4-d feature maps, with hand-written backwards.

Feature tensors are plain numpy arrays in (n, c, h, w) layout, C-contiguous,
float32 in the training path and float64 under gradient checking.  Complex
spectra are numpy complex arrays (the interleaved real/imag pairs are exactly
numpy's memory layout for them).

Every differentiable op returns ``(out, vjp)``.  The vjp closure maps the
loss gradient at the output back to gradients at the inputs, in input order.
There is no taped autodiff here: callers compose closures in reverse order
themselves, which keeps the dependency graph of a model explicit and easy to
audit.

Convolutions ride on im2col/col2im so the inner loops are BLAS matmuls.
col2im accumulates one kernel tap at a time with strided slice adds; the tap
count is at most 11*11, so the Python loop is negligible.

fft2d/ifft2d return plain arrays without a vjp.  The one consumer that
differentiates through the spectrum (the correlation-filter solve) carries
its own hand-derived chain rule; see heads.cf_block.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DivergenceError, ShapeError


def require_4d(what: str, x: np.ndarray) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected 4 axes (n, c, h, w), got {x.ndim}")


def finite_or_raise(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite value produced by {where}")


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, pad: int = 0):
    """Unfold sliding windows into columns.

    Returns ``(cols, (ho, wo))`` with cols of shape (n, c*kh*kw, ho*wo); the
    column index runs over output positions in row-major order.
    """
    require_4d("im2col input", x)
    n, c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError(
            f"window {kh}x{kw} exceeds padded input {hp}x{wp}"
        )
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n_, c_, ho, wo = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols), (ho, wo)


def col2im(cols, n, c, kh, kw, ho, wo, stride, hp, wp):
    """Adjoint of im2col: scatter-add columns back onto a (hp, wp) canvas."""
    buf = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    g = cols.reshape(n, c, kh, kw, ho, wo)
    for ki in range(kh):
        for kj in range(kw):
            buf[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += g[:, :, ki, kj]
    return buf


def conv2d_valid(x, kernel, bias, stride: int = 1, pad: int = 0):
    """Valid convolution (no implicit padding beyond the explicit ``pad``).

    kernel is (cout, cin, kh, kw); bias is (cout,).  vjp(gy) returns
    (gx, gkernel, gbias).
    """
    require_4d("conv2d_valid input", x)
    if kernel.ndim != 4:
        raise ShapeError(f"conv kernel: expected 4 axes, got {kernel.ndim}")
    n, cin, h, w = x.shape
    cout, ck, kh, kw = kernel.shape
    if ck != cin:
        raise ShapeError(f"conv kernel expects {ck} input channels, input has {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv bias: expected shape ({cout},), got {bias.shape}")
    cols, (ho, wo) = im2col(x, kh, kw, stride, pad)
    wmat = kernel.reshape(cout, cin * kh * kw)
    y = (wmat @ cols + bias[None, :, None]).reshape(n, cout, ho, wo)

    def vjp(gy):
        gy_f = gy.reshape(n, cout, ho * wo)
        gb = gy_f.sum(axis=(0, 2))
        gw = np.tensordot(gy_f, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        gcols = wmat.T @ gy_f
        hp, wp = h + 2 * pad, w + 2 * pad
        gx = col2im(gcols, n, cin, kh, kw, ho, wo, stride, hp, wp)
        if pad:
            gx = gx[:, :, pad:hp - pad, pad:wp - pad]
        return gx, gw, gb

    return y, vjp


def conv_transpose2d(x, kernel, stride: int, pad: int, target_hw):
    """Transposed convolution, the exact adjoint of a strided valid conv.

    kernel is (cin, cout, kh, kw), i.e. the layout of the forward conv this
    op transposes.  The natural output size is No = (h-1)*stride + k - 2*pad.
    target_hw may deviate from No by at most stride-1 per axis: a smaller
    target crops bottom/right rows that the adjoint counts as zero, a larger
    one zero-fills positions no window of the forward conv would reach.
    Both remain exact adjoints of a valid conv on the target size.
    vjp(gy) returns (gx, gkernel); there is no bias.
    """
    require_4d("conv_transpose2d input", x)
    n, cx, h, w = x.shape
    ck, cout, kh, kw = kernel.shape
    if ck != cx:
        raise ShapeError(f"transpose-conv kernel expects {ck} input channels, input has {cx}")
    th, tw = int(target_hw[0]), int(target_hw[1])
    noh = (h - 1) * stride + kh - 2 * pad
    now = (w - 1) * stride + kw - 2 * pad
    for label, t, no in (("height", th, noh), ("width", tw, now)):
        if t < 1 or abs(t - no) > stride - 1:
            raise ShapeError(
                f"target {label} {t} outside adjoint band [{no - stride + 1}, {no + stride - 1}]"
            )
    wmat = kernel.reshape(cx, cout * kh * kw)
    xf = x.reshape(n, cx, h * w)
    cols = wmat.T @ xf
    hp, wp = noh + 2 * pad, now + 2 * pad
    buf = col2im(cols, n, cout, kh, kw, h, w, stride, hp, wp)
    y = buf[:, :, pad:hp - pad, pad:wp - pad]
    if th < noh or tw < now:
        y = y[:, :, :th, :tw]
    if th > noh or tw > now:
        y = np.pad(y, ((0, 0), (0, 0), (0, max(th - noh, 0)), (0, max(tw - now, 0))))

    def vjp(gy):
        g = gy
        if th > noh or tw > now:
            g = g[:, :, :noh, :now]
        if th < noh or tw < now:
            g = np.pad(g, ((0, 0), (0, 0), (0, max(noh - th, 0)), (0, max(now - tw, 0))))
        gcols, (ho_, wo_) = im2col(g, kh, kw, stride, pad)
        gx = (wmat @ gcols).reshape(n, cx, h, w)
        gk = np.tensordot(xf, gcols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        return gx, gk

    return y, vjp


def max_pool2d(x, k: int, stride: int):
    """Max pooling, valid extent.  Ties go to the first window position in
    row-major order (smaller row, then smaller column)."""
    require_4d("max_pool2d input", x)
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"pool window {k} exceeds input {h}x{w}")
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def vjp(gy):
        gx = np.zeros_like(x)
        for t in range(k * k):
            ki, kj = divmod(t, k)
            contrib = np.where(arg == t, gy, 0).astype(x.dtype, copy=False)
            gx[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += contrib
        return gx

    return y, vjp


def global_avg_pool(x):
    """Spatial mean, keeping (n, c, 1, 1)."""
    require_4d("global_avg_pool input", x)
    n, c, h, w = x.shape
    y = x.mean(axis=(2, 3), keepdims=True)

    def vjp(gy):
        return np.broadcast_to(gy / (h * w), x.shape).astype(x.dtype, copy=False)

    return y, vjp


def sigmoid_values(x):
    """Overflow-safe elementwise sigmoid (plain values, no vjp)."""
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x, kind: str):
    """Elementwise nonlinearity: 'relu' or 'sigmoid'."""
    if kind == "relu":
        y = np.maximum(x, 0)

        def vjp(gy):
            return np.where(x > 0, gy, 0).astype(x.dtype, copy=False)

        return y, vjp
    if kind == "sigmoid":
        y = sigmoid_values(x)

        def vjp(gy):
            return gy * y * (1 - y)

        return y, vjp
    raise ConfigError(f"unknown activation kind {kind!r}")


def relu(x):
    return activation(x, "relu")


def sigmoid(x):
    return activation(x, "sigmoid")


def softmax_rows(x):
    """Row-stochastic softmax over the last axis (any leading axes)."""
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(gy):
        dot = (gy * s).sum(axis=-1, keepdims=True)
        return (gy - dot) * s

    return s, vjp


def xcorr2d(template, search):
    """Per-sample valid cross-correlation summed over channels.

    template (n, c, hz, wz) slides over search (n, c, hy, wy); each sample
    correlates with its own counterpart.  Output is (n, hy-hz+1, wy-wz+1).
    vjp(gy) returns (gtemplate, gsearch).
    """
    require_4d("xcorr2d template", template)
    require_4d("xcorr2d search", search)
    n, c, hz, wz = template.shape
    ns, cs, hy, wy = search.shape
    if (n, c) != (ns, cs):
        raise ShapeError(
            f"xcorr2d: template (n, c)=({n}, {c}) vs search ({ns}, {cs})"
        )
    if hz > hy or wz > wy:
        raise ShapeError(f"template {hz}x{wz} larger than search {hy}x{wy}")
    cols, (mh, mw) = im2col(search, hz, wz, 1, 0)
    tf = template.reshape(n, 1, c * hz * wz)
    y = (tf @ cols).reshape(n, mh, mw)

    def vjp(gy):
        gf = gy.reshape(n, 1, mh * mw)
        gt = (cols @ gf.transpose(0, 2, 1)).reshape(template.shape)
        gcols = tf.transpose(0, 2, 1) @ gf
        gs = col2im(gcols, n, c, hz, wz, mh, mw, 1, hy, wy)
        return gt, gs

    return y, vjp


def conv1x1(x, kernel, bias=None):
    """Pointwise convolution.  kernel (cout, cin, 1, 1), bias (cout,) or None.

    Same contract as conv2d_valid with a 1x1 kernel, but implemented as a
    channel-mixing tensordot since im2col would be pure overhead here.
    vjp(gy) returns (gx, gkernel, gbias) with gbias None when bias is None.
    """
    require_4d("conv1x1 input", x)
    if kernel.ndim != 4 or kernel.shape[2:] != (1, 1):
        raise ShapeError(f"conv1x1 kernel must be (cout, cin, 1, 1), got {kernel.shape}")
    cout, cin = kernel.shape[:2]
    if x.shape[1] != cin:
        raise ShapeError(f"conv1x1 kernel expects {cin} input channels, input has {x.shape[1]}")
    w = kernel.reshape(cout, cin)
    y = np.ascontiguousarray(np.tensordot(w, x, axes=([1], [1])).transpose(1, 0, 2, 3))
    if bias is not None:
        y += bias[None, :, None, None]

    def vjp(gy):
        gx = np.ascontiguousarray(
            np.tensordot(w, gy, axes=([0], [1])).transpose(1, 0, 2, 3)
        )
        gw = np.tensordot(gy, x, axes=([0, 2, 3], [0, 2, 3])).reshape(kernel.shape)
        gb = gy.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    return y, vjp


def fft2d(x):
    """2-d DFT over the trailing two axes.  Returns a complex array."""
    return np.fft.fft2(x, axes=(-2, -1))


def ifft2d(spec):
    """Inverse 2-d DFT over the trailing two axes, real part.

    All spectra this package inverts are products of transforms of real
    fields, so the imaginary residue is rounding noise by construction.
    """
    return np.fft.ifft2(spec, axes=(-2, -1)).real
