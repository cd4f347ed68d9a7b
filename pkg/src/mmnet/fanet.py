"""Fine-grained aware network omega(X) applied to conv3 features.

Two parallel views of the same feature map are fused:

  holistic:  X * sigmoid(decoder(encoder(X))), a single-channel gate
             broadcast over channels.  The encoder is two k5/s2/p2 convs
             (C -> C/2 -> C/4, relu), the decoder two k4/s2/p1 transpose
             convs (C/4 -> C/2 -> 1, relu between) with explicit target
             sizes so the gate lands back on the input geometry exactly.
  pixel:     row-stochastic self-attention.  s_ij = softmax_j <Wq xi, Wk xj>
             over the N = H*W positions, S_p[i] = sum_j s_ij * Wg xj, and
             the output is X + delta * S_p with delta learned from 0, so
             this branch starts as the exact identity.

fuse is a 1x1 conv on the channel concat [holistic | pixel] (2C -> C),
initialised near the average of the two branches.  Wq/Wk halve the channel
count (the usual non-local economy); Wg keeps C channels so the residual
addition type-checks; Wq/Wk/Wg carry no bias.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .params import ParamSet, accumulate
from .rng import Rng


def build_fanet(channels: int, seed: int = 0, dtype=np.float32,
                rng: Rng | None = None, prefix: str = "fanet.") -> ParamSet:
    if channels % 4 != 0:
        raise ConfigError(f"fanet channel count must be divisible by 4, got {channels}")
    rng = rng if rng is not None else Rng(seed)
    c, c2, c4 = channels, channels // 2, channels // 4
    params = ParamSet()

    def gauss(shape, fan_in):
        return rng.normal_array(shape, dtype=dtype) * dtype(np.sqrt(2.0 / fan_in))

    params.add(f"{prefix}enc1.w", gauss((c2, c, 5, 5), c * 25))
    params.add(f"{prefix}enc1.b", np.zeros(c2, dtype=dtype))
    params.add(f"{prefix}enc2.w", gauss((c4, c2, 5, 5), c2 * 25))
    params.add(f"{prefix}enc2.b", np.zeros(c4, dtype=dtype))
    # transpose-conv kernels in (cin, cout, kh, kw) layout, no biases
    params.add(f"{prefix}dec1.w", gauss((c4, c2, 4, 4), c4 * 16))
    params.add(f"{prefix}dec2.w", gauss((c2, 1, 4, 4), c2 * 16))
    params.add(f"{prefix}wq.w", gauss((c2, c, 1, 1), c))
    params.add(f"{prefix}wk.w", gauss((c2, c, 1, 1), c))
    params.add(f"{prefix}wg.w", gauss((c, c, 1, 1), c))
    # fuse starts as the branch average [I/2 | I/2] plus small noise
    fuse = rng.normal_array((c, 2 * c, 1, 1), dtype=dtype) * dtype(0.01)
    for i in range(c):
        fuse[i, i, 0, 0] += dtype(0.5)
        fuse[i, c + i, 0, 0] += dtype(0.5)
    params.add(f"{prefix}fuse.w", fuse)
    params.add(f"{prefix}fuse.b", np.zeros(c, dtype=dtype))
    params.add(f"{prefix}delta", np.zeros((), dtype=dtype))
    return params


def _check_input(params: ParamSet, x: np.ndarray, prefix: str,
                 min_spatial: int = 1) -> int:
    ops.require_4d("fanet input", x)
    c = params[f"{prefix}enc1.w"].shape[1]
    if x.shape[1] != c:
        raise ShapeError(f"fanet built for {c} channels, input has {x.shape[1]}")
    if x.shape[2] < min_spatial or x.shape[3] < min_spatial:
        raise ShapeError(
            f"fanet needs spatial size >= {min_spatial}, got {x.shape[2]}x{x.shape[3]}"
        )
    return c


def holistic_correlation(params: ParamSet, x: np.ndarray, prefix: str = "fanet."):
    """Gated feature map X * sigmoid(decoder(encoder(X)))."""
    # two stride-2 encoder stages must stay invertible to the target size
    _check_input(params, x, prefix, min_spatial=4)
    h0, w0 = x.shape[2], x.shape[3]
    e1, v_e1 = ops.conv2d_valid(x, params[f"{prefix}enc1.w"], params[f"{prefix}enc1.b"],
                                stride=2, pad=2)
    a1, v_a1 = ops.relu(e1)
    e2, v_e2 = ops.conv2d_valid(a1, params[f"{prefix}enc2.w"], params[f"{prefix}enc2.b"],
                                stride=2, pad=2)
    a2, v_a2 = ops.relu(e2)
    d1, v_d1 = ops.conv_transpose2d(a2, params[f"{prefix}dec1.w"], 2, 1,
                                    (e1.shape[2], e1.shape[3]))
    a3, v_a3 = ops.relu(d1)
    d2, v_d2 = ops.conv_transpose2d(a3, params[f"{prefix}dec2.w"], 2, 1, (h0, w0))
    gate, v_g = ops.sigmoid(d2)
    y = x * gate

    def vjp(gy):
        grads = {}
        ggate = (gy * x).sum(axis=1, keepdims=True)
        gx = gy * gate
        gd2 = v_g(ggate)
        ga3, gk = v_d2(gd2)
        grads[f"{prefix}dec2.w"] = gk
        gd1 = v_a3(ga3)
        ga2, gk = v_d1(gd1)
        grads[f"{prefix}dec1.w"] = gk
        ge2 = v_a2(ga2)
        ga1, gk, gb = v_e2(ge2)
        grads[f"{prefix}enc2.w"] = gk
        grads[f"{prefix}enc2.b"] = gb
        ge1 = v_a1(ga1)
        gx2, gk, gb = v_e1(ge1)
        grads[f"{prefix}enc1.w"] = gk
        grads[f"{prefix}enc1.b"] = gb
        return gx + gx2, grads

    return y, vjp


def pixel_correlation_map(params: ParamSet, x: np.ndarray, prefix: str = "fanet."):
    """Row-stochastic attention matrix s[n, i, j] over the N = H*W positions."""
    _check_input(params, x, prefix)
    n, c, h, w = x.shape
    npos = h * w
    q, v_q = ops.conv1x1(x, params[f"{prefix}wq.w"])
    k, v_k = ops.conv1x1(x, params[f"{prefix}wk.w"])
    qm = q.reshape(n, -1, npos).transpose(0, 2, 1)     # (n, N, C/2)
    km = k.reshape(n, -1, npos)                         # (n, C/2, N)
    logits = qm @ km
    s, v_s = ops.softmax_rows(logits)

    def vjp(gs):
        glog = v_s(gs)
        gqm = glog @ km.transpose(0, 2, 1)
        gkm = qm.transpose(0, 2, 1) @ glog
        gq = np.ascontiguousarray(gqm.transpose(0, 2, 1)).reshape(q.shape)
        gk = np.ascontiguousarray(gkm).reshape(k.shape)
        gx1, gwq, _ = v_q(gq)
        gx2, gwk, _ = v_k(gk)
        return gx1 + gx2, {f"{prefix}wq.w": gwq, f"{prefix}wk.w": gwk}

    return s, vjp


def pixel_correlation(params: ParamSet, x: np.ndarray, prefix: str = "fanet."):
    """Residual self-attention X + delta * S_p."""
    n, c, h, w = x.shape
    npos = h * w
    s, v_map = pixel_correlation_map(params, x, prefix)
    g, v_g = ops.conv1x1(x, params[f"{prefix}wg.w"])
    gm = g.reshape(n, c, npos)
    sp = gm @ s.transpose(0, 2, 1)                     # sp[:, :, i] = sum_j s_ij g_j
    delta = params[f"{prefix}delta"]
    y = x + delta * sp.reshape(x.shape)

    def vjp(gy):
        gyf = gy.reshape(n, c, npos)
        gdelta = np.asarray((gy * sp.reshape(x.shape)).sum(), dtype=x.dtype)
        gsp = delta * gyf
        ggm = gsp @ s                                   # (n,c,N)@(n,N,N) over j
        gs = np.ascontiguousarray(gsp.transpose(0, 2, 1)) @ gm
        gx_map, grads = v_map(gs)
        gx_g, gwg, _ = v_g(np.ascontiguousarray(ggm).reshape(g.shape))
        grads[f"{prefix}wg.w"] = gwg
        grads[f"{prefix}delta"] = gdelta
        return gy + gx_map + gx_g, grads

    return y, vjp


def fanet_forward(params: ParamSet, x: np.ndarray, prefix: str = "fanet."):
    """omega(X): fuse([holistic | pixel]) back to C channels."""
    c = _check_input(params, x, prefix)
    hol, v_h = holistic_correlation(params, x, prefix)
    pix, v_p = pixel_correlation(params, x, prefix)
    cat = np.concatenate([hol, pix], axis=1)
    y, v_f = ops.conv1x1(cat, params[f"{prefix}fuse.w"], params[f"{prefix}fuse.b"])

    def vjp(gy):
        gcat, gw, gb = v_f(gy)
        grads = {f"{prefix}fuse.w": gw, f"{prefix}fuse.b": gb}
        gx1, gh = v_h(np.ascontiguousarray(gcat[:, :c]))
        gx2, gp = v_p(np.ascontiguousarray(gcat[:, c:]))
        accumulate(grads, gh)
        accumulate(grads, gp)
        return gx1 + gx2, grads

    return y, vjp
