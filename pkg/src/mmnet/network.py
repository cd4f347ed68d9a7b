"""Whole-model assembly: parameters, config echo, and the multi-task pass.

One ParamSet holds every trainable tensor under dotted prefixes:

    bb.conv1..5.{w,b}      shared backbone
    fanet.*                fine-grained aware module (shared by Z and Y paths)
    head.cls.{w,b}         classification branch (pruned at tracking time)
    head.{dis,fin}.{gain,bias}  per-branch response scaling

forward_batch runs both matching branches plus the classifier on a batch of
exemplar/search pairs and returns the three losses, their weighted total and
a backward() closure that walks the hand-written vjp chain in reverse.  The
closure returns a gradient for every parameter (explicit zeros where a term
is disabled) so the optimizer and freeze logic never special-case names.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import ops
from .backbone import BackboneConfig, backbone_forward, build_backbone
from .errors import ConfigError, DivergenceError, ShapeError
from .fanet import build_fanet, fanet_forward
from .heads import (CFConfig, build_heads, cf_block, classification_forward,
                    cross_entropy, logistic_loss_batch, make_label_map,
                    multi_task_loss)
from .params import ParamSet, accumulate
from .rng import Rng


@dataclass(frozen=True)
class NetConfig:
    backbone: BackboneConfig
    cf: CFConfig
    num_classes: int = 4
    label_radius: float = 2.0
    pos_weight_share: float = 0.5
    stride: int = 8

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")

    @classmethod
    def from_preset(cls, preset: str = "desk", num_classes: int = 4, **kw) -> "NetConfig":
        return cls(backbone=BackboneConfig(preset=preset), cf=CFConfig(),
                   num_classes=num_classes, **kw)

    def response_size(self) -> int:
        bb = self.backbone
        _, ez5 = bb.tap_sizes(bb.exemplar_size)
        _, sy5 = bb.tap_sizes(bb.search_size)
        return sy5 - ez5 + 1

    def to_dict(self) -> dict:
        bb = self.backbone
        return {
            "backbone": {
                "preset": bb.preset, "channels": list(bb.channels),
                "kernel_sizes": list(bb.kernel_sizes), "strides": list(bb.strides),
                "pool_after": list(bb.pool_after), "pool_size": bb.pool_size,
                "pool_stride": bb.pool_stride, "in_channels": bb.in_channels,
                "exemplar_size": bb.exemplar_size, "search_size": bb.search_size,
            },
            "cf": {"lambda_cf": self.cf.lambda_cf, "sigma": self.cf.sigma,
                   "window": self.cf.window},
            "num_classes": self.num_classes,
            "label_radius": self.label_radius,
            "pos_weight_share": self.pos_weight_share,
            "stride": self.stride,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        bb = d["backbone"]
        backbone = BackboneConfig(
            preset=bb["preset"], channels=tuple(bb["channels"]),
            kernel_sizes=tuple(bb["kernel_sizes"]), strides=tuple(bb["strides"]),
            pool_after=tuple(bb["pool_after"]), pool_size=bb["pool_size"],
            pool_stride=bb["pool_stride"], in_channels=bb["in_channels"],
            exemplar_size=bb["exemplar_size"], search_size=bb["search_size"],
        )
        return cls(backbone=backbone, cf=CFConfig(**d["cf"]),
                   num_classes=d["num_classes"], label_radius=d["label_radius"],
                   pos_weight_share=d["pos_weight_share"], stride=d["stride"])

    def echo(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def build_network(cfg: NetConfig, seed: int, dtype=np.float32) -> ParamSet:
    """All ParamSets in one, built from a single seeded stream."""
    rng = Rng(seed)
    params = build_backbone(cfg.backbone, seed, dtype=dtype, rng=rng)
    params.update(build_fanet(cfg.backbone.conv3_channels, dtype=dtype, rng=rng))
    params.update(build_heads(cfg.backbone.conv5_channels, cfg.num_classes,
                              dtype=dtype, rng=rng))
    return params


class BatchOutput(NamedTuple):
    total: float
    l_dis: float
    l_cls: float
    l_fin: float
    response_dis: np.ndarray
    response_fin: np.ndarray
    backward: Callable[[], dict]


def _label_stack(m: int, n: int, centers, cfg: NetConfig, dtype):
    values = np.empty((n, m, m), dtype=dtype)
    weights = np.empty((n, m, m), dtype=dtype)
    for i in range(n):
        center = None if centers is None else centers[i]
        lm = make_label_map(m, cfg.label_radius, cfg.pos_weight_share, center)
        values[i] = lm.values
        weights[i] = lm.weights
    return values, weights


def forward_batch(params: ParamSet, cfg: NetConfig, exemplar: np.ndarray,
                  search: np.ndarray, class_ids, centers=None,
                  lambdas=(1.0, 1.0, 1.0)) -> BatchOutput:
    """Both branch losses plus classification on one batch of pairs.

    centers: optional per-sample (row, col) ground-truth response cells for
    the label maps; None puts every label at the map center.
    """
    lam1, lam2, lam3 = (float(v) for v in lambdas)
    n = exemplar.shape[0]
    if search.shape[0] != n:
        raise ShapeError(f"batch mismatch: {n} exemplars vs {search.shape[0]} searches")

    (z3, z5), v_bz = backbone_forward(params, exemplar, cfg.backbone)
    (y3, y5), v_by = backbone_forward(params, search, cfg.backbone)

    # discriminative branch: CF on conv5 template, correlate against conv5
    t5, v_cf5 = cf_block(z5, cfg.cf)
    r5raw, v_x5 = ops.xcorr2d(t5, y5)
    gain5, bias5 = params["head.dis.gain"], params["head.dis.bias"]
    r5 = gain5 * r5raw + bias5

    # fine-grained branch: FANet both sides, CF on the template side only
    wz3, v_fz = fanet_forward(params, z3)
    wy3, v_fy = fanet_forward(params, y3)
    t3, v_cf3 = cf_block(wz3, cfg.cf)
    r3raw, v_x3 = ops.xcorr2d(t3, wy3)
    gain3, bias3 = params["head.fin.gain"], params["head.fin.bias"]
    r3 = gain3 * r3raw + bias3

    if r3.shape != r5.shape:
        raise ShapeError(
            f"branch responses disagree: {r5.shape} vs {r3.shape}; fusion needs equal maps"
        )

    logits, v_cls = classification_forward(params, z5)

    m = r5.shape[1]
    values, weights = _label_stack(m, n, centers, cfg, r5.dtype)
    l_dis, g_dis = logistic_loss_batch(r5, values, weights)
    l_fin, g_fin = logistic_loss_batch(r3, values, weights)
    l_cls, g_logits = cross_entropy(logits, class_ids)
    for term, value in (("l_dis", l_dis), ("l_cls", l_cls), ("l_fin", l_fin)):
        if not np.isfinite(value):
            raise DivergenceError(f"{term} is not finite ({value})")
    total, (d1, d2, d3) = multi_task_loss(l_dis, l_cls, l_fin, lam1, lam2, lam3)

    def backward() -> dict:
        grads: dict[str, np.ndarray] = {}
        # discriminative branch
        gr5 = (d1 * g_dis).astype(r5raw.dtype, copy=False)
        grads["head.dis.gain"] = np.asarray((gr5 * r5raw).sum(), dtype=gain5.dtype)
        grads["head.dis.bias"] = np.asarray(gr5.sum(), dtype=bias5.dtype)
        gt5, gy5 = v_x5(gain5 * gr5)
        gz5 = v_cf5(gt5)
        # fine-grained branch
        gr3 = (d3 * g_fin).astype(r3raw.dtype, copy=False)
        grads["head.fin.gain"] = np.asarray((gr3 * r3raw).sum(), dtype=gain3.dtype)
        grads["head.fin.bias"] = np.asarray(gr3.sum(), dtype=bias3.dtype)
        gt3, gwy3 = v_x3(gain3 * gr3)
        gwz3 = v_cf3(gt3)
        gz3, gf = v_fz(gwz3)
        accumulate(grads, gf)
        gy3, gf = v_fy(gwy3)
        accumulate(grads, gf)
        # classifier (exemplar stream)
        gz5_cls, gcls = v_cls((d2 * g_logits).astype(logits.dtype, copy=False))
        accumulate(grads, gcls)
        # shared trunk, both streams
        _, gbb = v_bz(gz3, gz5 + gz5_cls)
        accumulate(grads, gbb)
        _, gbb = v_by(gy3, gy5)
        accumulate(grads, gbb)
        for name, t in params.items():
            if name not in grads:
                grads[name] = np.zeros_like(t)
        return grads

    return BatchOutput(total=total, l_dis=l_dis, l_cls=l_cls, l_fin=l_fin,
                       response_dis=r5, response_fin=r3, backward=backward)
