"""Matching branches, correlation-filter block, label maps and losses.

The discriminative branch correlates a CF-refined conv5 template against
conv5 search features; the fine-grained branch does the same on FANet-
transformed conv3 features.  Both response maps are 17x17 under the default
geometry, so their elementwise fusion at tracking time is well-typed.

CF block.  The template is (optionally) multiplied by a cosine window, then
each channel is solved as a Fourier-domain ridge regression against a
Gaussian label g placed at the correlation origin (circularly centered, so
responses peak where the template content actually sits):

    filter_c = Re ifft2( conj(ghat) * zhat_c / (sum_c |zhat_c|^2 + lambda) )

with a single denominator shared across channels.  The solve runs in double
precision regardless of the input dtype (the maps are tiny) and carries a
hand-derived complex chain rule, so the block is differentiable w.r.t. the
template.  The cosine window keeps its endpoints nonzero (a length-n slice
of a length-n+2 Hann) so border features are attenuated, not erased.

Each branch response passes through a learnable scalar gain (init 1e-3) and
bias (init 0): raw channel-summed inner products are far too large to feed
a logistic loss directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .backbone import backbone_forward
from .errors import ConfigError, InputError, ShapeError
from .fanet import fanet_forward
from .params import ParamSet
from .rng import Rng


@dataclass(frozen=True)
class CFConfig:
    lambda_cf: float = 0.01
    sigma: float = 0.1          # gaussian bandwidth as a fraction of template side
    window: bool = True

    def __post_init__(self):
        if self.lambda_cf < 0:
            raise ConfigError(f"lambda_cf must be >= 0, got {self.lambda_cf}")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")


@dataclass(frozen=True)
class LabelMap:
    values: np.ndarray        # entries in {+1, -1}
    weights: np.ndarray       # nonnegative, sums to 1

    def __post_init__(self):
        if self.values.shape != self.weights.shape:
            raise ShapeError("label values and weights must share a shape")
        if not np.all(np.isin(self.values, (-1.0, 1.0))):
            raise InputError("label values must be +1 or -1")
        if not np.any(self.values > 0):
            raise InputError("label map needs at least one positive cell")
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise InputError("label weights must sum to 1")


def cosine_window(n: int) -> np.ndarray:
    """Hann window trimmed to nonzero endpoints."""
    return np.hanning(n + 2)[1:-1]


def gaussian_label(h: int, w: int, sigma: float) -> np.ndarray:
    """Gaussian bump at the circular origin (peak value 1 at index (0,0))."""
    di = np.minimum(np.arange(h), h - np.arange(h)).astype(np.float64)
    dj = np.minimum(np.arange(w), w - np.arange(w)).astype(np.float64)
    return np.exp(-(di[:, None] ** 2 + dj[None, :] ** 2) / (2.0 * sigma * sigma))


def cf_block(template: np.ndarray, cfg: CFConfig):
    """Per-channel discriminative correlation filter of the template.

    Accepts (n, C, h, w); online tracking uses the single-template case
    n=1.  Returns (filter, vjp) where vjp maps a filter cotangent back to
    the template.
    """
    ops.require_4d("cf_block template", template)
    n, c, h, w = template.shape
    if h < 3 or w < 3:
        raise ShapeError(f"cf_block needs template side >= 3, got {h}x{w}")
    if cfg.lambda_cf < 0:
        raise ConfigError(f"lambda_cf must be >= 0, got {cfg.lambda_cf}")
    dtype = template.dtype
    if cfg.window:
        win = cosine_window(h)[:, None] * cosine_window(w)[None, :]
    else:
        win = np.ones((h, w))
    zw = template.astype(np.float64) * win
    zf = np.fft.fft2(zw, axes=(-2, -1))
    ghat = np.fft.fft2(gaussian_label(h, w, cfg.sigma * min(h, w)))
    denom = (zf * np.conj(zf)).real.sum(axis=1, keepdims=True) + cfg.lambda_cf
    hf = np.conj(ghat)[None, None] * zf / denom
    filt = np.fft.ifft2(hf, axes=(-2, -1)).real.astype(dtype)

    def vjp(gfilt):
        ghf = np.fft.fft2(gfilt.astype(np.float64), axes=(-2, -1)) / (h * w)
        gnum = ghf / denom
        gden = -(ghf * np.conj(hf)).real.sum(axis=1, keepdims=True) / denom
        gzf = gnum * ghat[None, None] + 2.0 * gden * zf
        gzw = np.fft.ifft2(gzf, axes=(-2, -1)).real * (h * w)
        return (gzw * win).astype(dtype)

    return filt, vjp


def cross_correlate(template: np.ndarray, search: np.ndarray):
    """Single-pair channel-summed sliding inner product -> (M, M) matrix.

    The batched training path uses ops.xcorr2d directly; this is the
    spec-level single-template view of the same kernel.
    """
    if template.shape[0] != 1 or search.shape[0] != 1:
        raise ShapeError("cross_correlate expects a single template/search pair")
    resp, v = ops.xcorr2d(template, search)

    def vjp(g):
        return v(g[None])

    return resp[0], vjp


def make_label_map(m: int, radius_cells: float, pos_weight_share: float = 0.5,
                   center: tuple[int, int] | None = None) -> LabelMap:
    """+1 within radius_cells (Euclidean) of center, -1 elsewhere.

    Positive cells share pos_weight_share of the total weight uniformly,
    negatives the rest.  center defaults to the map middle; training shifts
    it to the ground-truth cell of each sampled pair.
    """
    if m < 1:
        raise ConfigError(f"label map size must be >= 1, got {m}")
    if radius_cells < 0:
        raise ConfigError(f"label radius must be >= 0, got {radius_cells}")
    if not 0.0 <= pos_weight_share <= 1.0:
        raise ConfigError(f"pos_weight_share must be in [0,1], got {pos_weight_share}")
    ci, cj = (m // 2, m // 2) if center is None else center
    if not (0 <= ci < m and 0 <= cj < m):
        raise InputError(f"label center ({ci},{cj}) outside {m}x{m} map")
    di = np.arange(m)[:, None] - ci
    dj = np.arange(m)[None, :] - cj
    pos = (di * di + dj * dj) <= radius_cells * radius_cells
    npos = int(pos.sum())
    nneg = m * m - npos
    if nneg == 0:
        raise ConfigError(f"radius {radius_cells} leaves no negative cell in {m}x{m}")
    values = np.where(pos, 1.0, -1.0)
    weights = np.where(pos, pos_weight_share / npos, (1.0 - pos_weight_share) / nneg)
    return LabelMap(values=values, weights=weights)


def _softplus(t):
    return np.maximum(t, 0) + np.log1p(np.exp(-np.abs(t)))


def logistic_loss(response: np.ndarray, labels: LabelMap):
    """Weighted mean of log(1 + exp(-y*o)); returns (loss, dloss/dresponse)."""
    if response.shape != labels.values.shape:
        raise ShapeError(
            f"response {response.shape} vs labels {labels.values.shape}"
        )
    t = -labels.values * response
    loss = float((labels.weights * _softplus(t)).sum())
    grad = labels.weights * (-labels.values) * ops.sigmoid_values(t)
    return loss, grad


def logistic_loss_batch(responses: np.ndarray, values: np.ndarray,
                        weights: np.ndarray):
    """Batch mean of per-sample weighted logistic losses; grad matches."""
    t = -values * responses
    loss = float((weights * _softplus(t)).sum() / responses.shape[0])
    grad = weights * (-values) * ops.sigmoid_values(t) / responses.shape[0]
    return loss, grad


def build_heads(c5: int, num_classes: int, seed: int = 0, dtype=np.float32,
                rng: Rng | None = None, prefix: str = "head.") -> ParamSet:
    if num_classes < 2:
        raise ConfigError(f"classifier needs K >= 2 classes, got {num_classes}")
    rng = rng if rng is not None else Rng(seed)
    params = ParamSet()
    w = rng.normal_array((num_classes, c5, 1, 1), dtype=dtype) * dtype(np.sqrt(2.0 / c5))
    params.add(f"{prefix}cls.w", w)
    params.add(f"{prefix}cls.b", np.zeros(num_classes, dtype=dtype))
    for branch in ("dis", "fin"):
        params.add(f"{prefix}{branch}.gain", np.asarray(1e-3, dtype=dtype))
        params.add(f"{prefix}{branch}.bias", np.asarray(0.0, dtype=dtype))
    return params


def classification_forward(params: ParamSet, conv5_tap: np.ndarray,
                           prefix: str = "head.cls."):
    """GAP then 1x1 conv -> (n, K) logits.  vjp returns (g_tap, grads)."""
    pooled, v_gap = ops.global_avg_pool(conv5_tap)
    out, v_fc = ops.conv1x1(pooled, params[f"{prefix}w"], params[f"{prefix}b"])
    n, k = out.shape[:2]
    logits = out.reshape(n, k)

    def vjp(glogits):
        gout = glogits.reshape(n, k, 1, 1)
        gpooled, gw, gb = v_fc(gout)
        gtap = v_gap(gpooled)
        return gtap, {f"{prefix}w": gw, f"{prefix}b": gb}

    return logits, vjp


def cross_entropy(logits: np.ndarray, class_idx):
    """Mean negative log softmax probability; returns (loss, dloss/dlogits)."""
    idx = np.asarray(class_idx, dtype=np.int64)
    n, k = logits.shape
    if idx.shape != (n,):
        raise ShapeError(f"class_idx must have shape ({n},), got {idx.shape}")
    if np.any(idx < 0) or np.any(idx >= k):
        raise InputError(f"class index outside [0, {k})")
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=1)) + m[:, 0]
    loss = float((lse - logits[np.arange(n), idx]).mean())
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(n), idx] -= 1.0
    return loss, p / n


def multi_task_loss(l_dis: float, l_cls: float, l_fin: float,
                    lam1: float = 1.0, lam2: float = 1.0, lam3: float = 1.0):
    """Weighted sum of the three branch losses; returns (total, per-term grads)."""
    for name, v in (("l_dis", l_dis), ("l_cls", l_cls), ("l_fin", l_fin)):
        if not np.isfinite(v):
            raise InputError(f"{name} is not finite")
    return lam1 * l_dis + lam2 * l_cls + lam3 * l_fin, (lam1, lam2, lam3)


def discriminative_similarity(z_img, y_img, params: ParamSet, bb_cfg, cf_cfg):
    """g(sigma(conv5(Z)), conv5(Y)) with the trained gain/bias, as (M, M)."""
    (_, z5), _ = backbone_forward(params, z_img, bb_cfg)
    (_, y5), _ = backbone_forward(params, y_img, bb_cfg)
    filt, _ = cf_block(z5, cf_cfg)
    resp, _ = ops.xcorr2d(filt, y5)
    return params["head.dis.gain"] * resp[0] + params["head.dis.bias"]


def fine_grained_similarity(z_img, y_img, params: ParamSet, bb_cfg, cf_cfg):
    """g(sigma(omega(conv3(Z))), omega(conv3(Y))) with gain/bias, as (M, M)."""
    (z3, _), _ = backbone_forward(params, z_img, bb_cfg)
    (y3, _), _ = backbone_forward(params, y_img, bb_cfg)
    wz3, _ = fanet_forward(params, z3)
    wy3, _ = fanet_forward(params, y3)
    filt, _ = cf_block(wz3, cf_cfg)
    resp, _ = ops.xcorr2d(filt, wy3)
    return params["head.fin.gain"] * resp[0] + params["head.fin.bias"]
