"""Online tracking: fused-response localization with a scale pyramid.

A TrackerSession carries frozen network weights (classification head
dropped), the two branch templates after the correlation-filter block, and
the per-frame state (box, cumulative scale).  track_frame crops a pyramid
of search windows, fuses the discriminative and fine-grained responses as
beta * f_dis + (1 - beta) * f_fin, bicubic-upsamples the fused map, blends
in a cosine window, penalizes non-central scales and moves the box to the
global argmax.

Trajectory CSV: one line per frame "frame_index,x,y,w,h,score" where score
is the fused max response (1.0 on the init frame, which has no response).
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import ops
from .backbone import backbone_forward
from .dataio import EXEMPLAR_SIZE, SEARCH_SIZE, crop_window, patch_side
from .errors import ConfigError, FormatError, InputError
from .fanet import fanet_forward
from .heads import cf_block, cosine_window
from .network import NetConfig
from .params import ParamSet


@dataclass
class TrackerConfig:
    scales: int = 3
    scale_step: float = 1.0375
    scale_penalty: float = 0.9745
    scale_damping: float = 0.59
    window_weight: float = 0.176
    response_upsample: int = 16
    template_mode: str = "first"
    ema_rate: float = 0.01
    beta: float = 0.5

    def __post_init__(self):
        if self.scales < 1 or self.scales % 2 == 0:
            raise ConfigError(f"scales must be an odd positive int, got {self.scales}")
        if self.scale_step <= 0:
            raise ConfigError(f"scale_step must be > 0, got {self.scale_step}")
        for name in ("scale_penalty", "scale_damping", "window_weight",
                     "ema_rate", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.response_upsample < 1:
            raise ConfigError(
                f"response_upsample must be >= 1, got {self.response_upsample}"
            )
        if self.template_mode not in ("first", "previous", "ema"):
            raise ConfigError(f"unknown template_mode {self.template_mode!r}")


def catmull_rom_matrix(n_in: int, factor: int) -> np.ndarray:
    """Interpolation matrix ((n_in-1)*factor + 1, n_in), borders clamped.

    Keys' cubic with a = -0.5: exact at the input grid points and exact for
    quadratic sequences away from the clamped borders.
    """
    if n_in < 2 or factor < 1:
        raise InputError(f"need n_in >= 2 and factor >= 1, got {n_in}, {factor}")
    n_out = (n_in - 1) * factor + 1
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        s = o / factor
        i = int(np.floor(s))
        t = s - i
        weights = (
            ((-0.5 * t + 1.0) * t - 0.5) * t,
            (1.5 * t - 2.5) * t * t + 1.0,
            ((-1.5 * t + 2.0) * t + 0.5) * t,
            (0.5 * t - 0.5) * t * t,
        )
        for tap, wgt in zip((i - 1, i, i + 1, i + 2), weights):
            mat[o, min(max(tap, 0), n_in - 1)] += wgt
    return mat


def upsample_response(response: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Separable bicubic upsampling of a square 2-D map."""
    r = np.asarray(response, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise InputError(f"expected a square 2-D response, got {r.shape}")
    return mat @ r @ mat.T


@dataclass
class TrackerSession:
    params: ParamSet             # classification head already dropped
    net_cfg: NetConfig
    cfg: TrackerConfig
    box: np.ndarray              # (x, y, w, h) float64, mutates per frame
    scale: float                 # cumulative size factor relative to init
    t5: np.ndarray               # discriminative template after cf_block
    t3: np.ndarray               # fine-grained template after cf_block
    f5: np.ndarray               # pre-CF conv5 template features (ema state)
    f3: np.ndarray               # pre-CF fine-grained features (ema state)
    window: np.ndarray           # cosine window at upsampled resolution
    upsample: np.ndarray         # cached interpolation matrix
    last_score: float = 1.0


def _template_features(params: ParamSet, net_cfg: NetConfig,
                       exemplar: np.ndarray):
    """Pre-CF features of both branches for one exemplar crop."""
    (z3, z5), _ = backbone_forward(params, exemplar, net_cfg.backbone)
    wz3, _ = fanet_forward(params, z3)
    return z5, wz3


def fuse_responses(r_dis: np.ndarray, r_fin: np.ndarray, beta: float) -> np.ndarray:
    """beta-weighted elementwise mix; beta = 0.5 halves the plain sum exactly."""
    return beta * np.asarray(r_dis, dtype=np.float64) \
        + (1.0 - beta) * np.asarray(r_fin, dtype=np.float64)


def branch_responses(session: TrackerSession, crops: np.ndarray):
    """Gain/bias-calibrated response maps of both branches for search crops."""
    (y3, y5), _ = backbone_forward(session.params, crops, session.net_cfg.backbone)
    wy3, _ = fanet_forward(session.params, y3)
    n = crops.shape[0]
    r5, _ = ops.xcorr2d(np.repeat(session.t5, n, axis=0), y5)
    r3, _ = ops.xcorr2d(np.repeat(session.t3, n, axis=0), wy3)
    r_dis = session.params["head.dis.gain"] * r5 + session.params["head.dis.bias"]
    r_fin = session.params["head.fin.gain"] * r3 + session.params["head.fin.bias"]
    return r_dis, r_fin


def init_session(ckpt, frame0: np.ndarray, box0, cfg: TrackerConfig | None = None
                 ) -> TrackerSession:
    """Build a session: exemplar templates from frame0, classifier pruned."""
    cfg = cfg or TrackerConfig()
    if "net" not in ckpt.config:
        raise FormatError("checkpoint carries no network config echo")
    net_cfg = NetConfig.from_dict(ckpt.config["net"])

    box = np.asarray(box0, dtype=np.float64)
    if box.shape != (4,) or box[2] <= 0 or box[3] <= 0:
        raise InputError(f"degenerate init box {box.tolist()}")

    params = ParamSet()
    for name in ckpt.params.names():
        if not name.startswith("head.cls."):
            params.add(name, ckpt.params[name].copy())

    cy = box[1] + box[3] / 2.0
    cx = box[0] + box[2] / 2.0
    side = patch_side(box)
    patch = crop_window(frame0, (cy, cx), side, EXEMPLAR_SIZE)
    exemplar = patch[None, None].astype(np.float32)
    f5, f3 = _template_features(params, net_cfg, exemplar)
    t5, _ = cf_block(f5, net_cfg.cf)
    t3, _ = cf_block(f3, net_cfg.cf)

    m = net_cfg.response_size()
    n_up = (m - 1) * cfg.response_upsample + 1
    return TrackerSession(
        params=params, net_cfg=net_cfg, cfg=cfg, box=box.copy(), scale=1.0,
        t5=t5, t3=t3, f5=f5, f3=f3,
        window=cosine_window(n_up), upsample=catmull_rom_matrix(m, cfg.response_upsample),
    )


def update_template(session: TrackerSession, new_f5: np.ndarray,
                    new_f3: np.ndarray) -> None:
    """Blend new pre-CF features per template_mode, then re-run the CF block."""
    mode = session.cfg.template_mode
    if mode == "first":
        warnings.warn("update_template is a no-op in template_mode='first'")
        return
    if mode == "previous":
        session.f5, session.f3 = new_f5, new_f3
    else:  # ema
        rho = session.cfg.ema_rate
        session.f5 = (1.0 - rho) * session.f5 + rho * new_f5
        session.f3 = (1.0 - rho) * session.f3 + rho * new_f3
    session.t5, _ = cf_block(session.f5, session.net_cfg.cf)
    session.t3, _ = cf_block(session.f3, session.net_cfg.cf)


def track_frame(session: TrackerSession, frame: np.ndarray):
    """One tracking step; returns (predicted box, fused max score)."""
    cfg = session.cfg
    box = session.box
    cy = box[1] + box[3] / 2.0
    cx = box[0] + box[2] / 2.0
    side_y = patch_side(box) * SEARCH_SIZE / EXEMPLAR_SIZE

    half = cfg.scales // 2
    factors = [cfg.scale_step ** k for k in range(-half, half + 1)]
    crops = np.stack([
        crop_window(frame, (cy, cx), side_y * f, SEARCH_SIZE) for f in factors
    ])[:, None].astype(np.float32)

    r_dis, r_fin = branch_responses(session, crops)
    fused = fuse_responses(r_dis, r_fin, cfg.beta)

    n = len(factors)
    w = cfg.window_weight
    best = None
    for k in range(n):
        up = upsample_response(fused[k], session.upsample)
        blended = (1.0 - w) * up + w * session.window
        if k != half:
            blended = cfg.scale_penalty * blended
        idx = np.argmax(blended)
        pi, pj = np.unravel_index(idx, blended.shape)
        value = blended[pi, pj]
        if best is None or value > best[0]:
            best = (value, k, pi, pj)

    score, k_best, pi, pj = best
    center = (session.window.shape[0] - 1) // 2
    cells_i = (pi - center) / cfg.response_upsample
    cells_j = (pj - center) / cfg.response_upsample
    side_chosen = side_y * factors[k_best]
    px_per_cell = session.net_cfg.stride * side_chosen / SEARCH_SIZE
    cy_new = cy + cells_i * px_per_cell
    cx_new = cx + cells_j * px_per_cell

    growth = (1.0 - cfg.scale_damping) + cfg.scale_damping * factors[k_best]
    w_new = box[2] * growth
    h_new = box[3] * growth
    session.box = np.array([cx_new - w_new / 2.0, cy_new - h_new / 2.0,
                            w_new, h_new])
    session.scale *= growth
    session.last_score = float(score)

    if cfg.template_mode != "first":
        side_z = patch_side(session.box)
        patch = crop_window(frame, (cy_new, cx_new), side_z, EXEMPLAR_SIZE)
        new_f5, new_f3 = _template_features(
            session.params, session.net_cfg, patch[None, None].astype(np.float32)
        )
        update_template(session, new_f5, new_f3)

    return session.box.copy(), float(score)


def track_sequence(ckpt, frames, box0, cfg: TrackerConfig | None = None):
    """Track a full sequence; returns (boxes (n,4), scores (n,), fps).

    Row 0 echoes the init box with score 1.0; the timer covers init plus
    every tracked frame.
    """
    if len(frames) == 0:
        raise InputError("empty sequence")
    t0 = time.perf_counter()
    session = init_session(ckpt, frames[0], box0, cfg)
    boxes = [np.asarray(box0, dtype=np.float64)]
    scores = [1.0]
    for frame in frames[1:]:
        box, score = track_frame(session, frame)
        boxes.append(box)
        scores.append(score)
    elapsed = max(time.perf_counter() - t0, 1e-9)
    return np.stack(boxes), np.array(scores), len(frames) / elapsed


def write_trajectory(boxes, scores, path: str) -> None:
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if boxes.ndim != 2 or boxes.shape[1] != 4 or len(scores) != len(boxes):
        raise InputError(f"bad trajectory arrays: {boxes.shape}, {scores.shape}")
    with open(path, "w") as fh:
        fh.write("frame_index,x,y,w,h,score\n")
        for i, (box, score) in enumerate(zip(boxes, scores)):
            fh.write(f"{i},{box[0]:.6f},{box[1]:.6f},{box[2]:.6f},"
                     f"{box[3]:.6f},{score:.6f}\n")


def read_trajectory(path: str):
    """Returns (boxes (n,4), scores (n,)) from a trajectory CSV."""
    boxes, scores = [], []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "frame_index,x,y,w,h,score":
            raise FormatError(f"{path}: unexpected trajectory header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise FormatError(f"{path}:{lineno}: expected 6 fields")
            idx = int(parts[0])
            if idx != len(boxes):
                raise FormatError(f"{path}:{lineno}: frame index {idx} out of order")
            boxes.append([float(v) for v in parts[1:5]])
            scores.append(float(parts[5]))
    if not boxes:
        raise FormatError(f"{path}: no trajectory rows")
    return np.array(boxes), np.array(scores)
