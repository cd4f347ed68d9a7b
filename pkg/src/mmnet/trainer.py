"""Multi-task optimization: SGD + momentum, exponential lr decay, the three
multi-domain aggregation strategies, and binary checkpoint persistence.

A training run is a list of stages (apply_strategy); each stage owns a data
plan (grayscale / tir / mix), a freeze policy tuple, an epoch count and an
lr range.  Momentum buffers are reset at every stage boundary so a frozen
stage-one parameter cannot coast through stage two on stale velocity.

Checkpoint file layout (all integers little-endian):

    magic "MMN1" | u32 version=1
    u32 tensor count | per tensor: u16 name len, UTF-8 name, u8 rank,
                       rank x u32 dims, raw little-endian f32 data
    optimizer section (same tensor encoding, own u32 count)
    u32 rng word count | that many u64 state words
    u32 config length | UTF-8 JSON config echo (includes the epoch counter)
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .backbone import freeze_mask
from .dataio import mixed_iterator, sample_pair
from .errors import (CheckpointError, ConfigError, DivergenceError,
                     InputError, ShapeError)
from .network import NetConfig, build_network, forward_batch
from .params import ParamSet
from .rng import Rng

STRATEGIES = ("vid-only", "tir-only", "retrain", "finetune", "mix")

CKPT_MAGIC = b"MMN1"
CKPT_VERSION = 1

LOSS_HEADER = "epoch,batch,l_dis,l_cls,l_fin,total,lr"


@dataclass
class TrainConfig:
    strategy: str = "vid-only"
    epochs: int | None = None        # None -> the strategy's own plan
    pairs_per_epoch: int = 2000
    batch: int = 8
    momentum: float = 0.9
    lr_hi: float | None = None       # None -> the strategy's own plan
    lr_lo: float | None = None
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    seed: int = 0
    preset: str = "desk"
    num_classes: int = 4
    weight_decay: float = 0.0
    clip_norm: float = 10.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; "
                              f"pick one of {', '.join(STRATEGIES)}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.pairs_per_epoch < 1:
            raise ConfigError(f"pairs_per_epoch must be >= 1, got {self.pairs_per_epoch}")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if (self.lr_hi is None) != (self.lr_lo is None):
            raise ConfigError("lr_hi and lr_lo must be overridden together")
        if self.lr_hi is not None and not self.lr_hi >= self.lr_lo > 0:
            raise ConfigError(f"need lr_hi >= lr_lo > 0, got {self.lr_hi}, {self.lr_lo}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be > 0, got {self.clip_norm}")

    def lambdas(self) -> tuple:
        return (self.lambda1, self.lambda2, self.lambda3)


@dataclass
class StagePlan:
    data: str                        # grayscale | tir | mix
    freeze: tuple                    # freeze_mask policy names, OR-combined
    epochs: int
    lr_hi: float
    lr_lo: float


def apply_strategy(strategy: str) -> list:
    """Canonical stage list for each multi-domain aggregation strategy."""
    vid = StagePlan(data="grayscale", freeze=(), epochs=60, lr_hi=1e-2, lr_lo=1e-5)
    if strategy == "vid-only":
        return [vid]
    if strategy == "tir-only":
        return [StagePlan(data="tir", freeze=(), epochs=60, lr_hi=1e-2, lr_lo=1e-5)]
    if strategy == "retrain":
        return [vid, StagePlan(data="tir", freeze=(), epochs=30,
                               lr_hi=1e-3, lr_lo=1e-5)]
    if strategy == "finetune":
        return [vid, StagePlan(data="tir",
                               freeze=("first3", "fine-grained-branch"),
                               epochs=30, lr_hi=1e-3, lr_lo=1e-5)]
    if strategy == "mix":
        return [StagePlan(data="mix", freeze=("classifier-only",), epochs=70,
                          lr_hi=1e-2, lr_lo=1e-5)]
    raise ConfigError(f"unknown strategy {strategy!r}")


def lr_schedule(epoch: int, total: int, lr_hi: float, lr_lo: float) -> float:
    """Exponential decay lr_hi -> lr_lo over total epochs; total=1 -> lr_hi."""
    if not 0 <= epoch < total:
        raise InputError(f"epoch {epoch} outside [0, {total})")
    if total == 1:
        return lr_hi
    return lr_hi * (lr_lo / lr_hi) ** (epoch / (total - 1))


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all grads in place so their joint norm is <= max_norm.

    Returns the pre-clip global norm (callers log it; tests assert on it).
    """
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


def sgd_momentum_step(params: ParamSet, grads: dict, velocity: dict,
                      lr: float, momentum: float, freeze: dict | None = None,
                      weight_decay: float = 0.0) -> None:
    """v <- mu*v + g; theta <- theta - lr*v, in place.

    Frozen parameters are left untouched and their velocity is reset to 0,
    so unfreezing later starts from rest rather than from stale momentum.
    """
    for name in params.names():
        g = np.asarray(grads[name])
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"grad for {name}: {g.shape} vs param {p.shape}")
        if freeze is not None and freeze.get(name, False):
            velocity[name] = np.zeros_like(p)
            continue
        if weight_decay:
            g = g + weight_decay * p
        v = momentum * velocity[name] + g
        velocity[name] = v.astype(p.dtype, copy=False)
        params[name] = (p - lr * v).astype(p.dtype, copy=False)


# ------------------------------------------------------------- persistence


@dataclass
class Checkpoint:
    config: dict                     # net + train echo, includes "epoch"
    params: ParamSet
    velocity: dict
    rng_state: tuple
    version: int = CKPT_VERSION


def _pack_tensor_section(named) -> bytes:
    out = bytearray(struct.pack("<I", len(named)))
    for name, arr in named:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise InputError(f"tensor name too long: {name[:40]}...")
        # ascontiguousarray would promote rank-0 tensors to (1,)
        a = np.asarray(arr, dtype="<f4", order="C")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", a.ndim)
        if a.ndim:
            out += struct.pack(f"<{a.ndim}I", *a.shape)
        out += a.tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"{self.path}: truncated at byte {self.pos} "
                f"(wanted {n} more, have {len(self.data) - self.pos})"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _read_tensor_section(r: _Reader) -> list:
    count = r.u32()
    out = []
    for _ in range(count):
        name = r.take(r.u16()).decode("utf-8")
        rank = r.u8()
        dims = tuple(r.u32() for _ in range(rank))
        n_elem = 1
        for d in dims:
            n_elem *= d
        data = np.frombuffer(r.take(4 * n_elem), dtype="<f4").reshape(dims)
        out.append((name, data.copy()))
    return out


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Atomic write: the file appears complete or not at all."""
    names = ckpt.params.names()
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<I", ckpt.version)
    blob += _pack_tensor_section([(n, ckpt.params[n]) for n in names])
    blob += _pack_tensor_section([(n, ckpt.velocity[n]) for n in names])
    words = tuple(int(w) for w in ckpt.rng_state)
    blob += struct.pack("<I", len(words))
    blob += struct.pack(f"<{len(words)}Q", *words)
    echo = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(echo)) + echo
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version = r.u32()
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    params = ParamSet()
    for name, arr in _read_tensor_section(r):
        params.add(name, arr)
    velocity = dict(_read_tensor_section(r))
    if sorted(velocity) != sorted(params.names()):
        raise CheckpointError(f"{path}: optimizer tensors disagree with parameters")
    rng_state = tuple(r.u64() for _ in range(r.u32()))
    config = json.loads(r.take(r.u32()).decode("utf-8"))
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return Checkpoint(config=config, params=params, velocity=velocity,
                      rng_state=rng_state, version=version)


# ----------------------------------------------------------------- training


def _combined_freeze(params: ParamSet, policies) -> dict | None:
    if not policies:
        return None
    masks = [freeze_mask(params, p) for p in policies]
    return {name: any(m[name] for m in masks) for name in params.names()}


def _forward_checked(params, net_cfg, exemplar, search, class_ids, centers,
                     lambdas, epoch: int, batch: int):
    """forward_batch plus position diagnostics on any non-finite loss term."""
    try:
        out = forward_batch(params, net_cfg, exemplar, search, class_ids,
                            centers=centers, lambdas=lambdas)
    except DivergenceError as err:
        raise DivergenceError(f"epoch {epoch}, batch {batch}: {err}") from None
    if not np.isfinite(out.total):
        raise DivergenceError(
            f"epoch {epoch}, batch {batch}: total is not finite ({out.total})"
        )
    return out


def _batch_arrays(pairs, m: int):
    exemplar = np.concatenate([p.exemplar for p in pairs])
    search = np.concatenate([p.search for p in pairs])
    class_ids = np.array([p.class_id for p in pairs], dtype=np.int64)
    centers = np.empty((len(pairs), 2), dtype=np.int64)
    for i, p in enumerate(pairs):
        di, dj = p.displacement
        centers[i, 0] = min(max(m // 2 + di, 0), m - 1)
        centers[i, 1] = min(max(m // 2 + dj, 0), m - 1)
    return exemplar, search, class_ids, centers


def _stage_stream(plan: str, datasets: dict, rng: Rng):
    if plan == "mix":
        return mixed_iterator(datasets.get("grayscale", []),
                              datasets.get("tir", []), (1.0, 1.0), rng)

    def gen():
        while True:
            yield sample_pair(datasets[plan], rng)

    return gen()


def _check_datasets(stages, datasets: dict) -> None:
    for stage in stages:
        needed = ("grayscale", "tir") if stage.data == "mix" else (stage.data,)
        for domain in needed:
            if not datasets.get(domain):
                raise InputError(f"strategy needs a non-empty {domain!r} dataset")


def write_loss_log(rows, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(LOSS_HEADER + "\n")
        for epoch, batch, l_dis, l_cls, l_fin, total, lr in rows:
            fh.write(f"{epoch},{batch},{l_dis:.8g},{l_cls:.8g},"
                     f"{l_fin:.8g},{total:.8g},{lr:.8g}\n")


def train(cfg: TrainConfig, datasets: dict, out_dir: str | None = None,
          net_cfg: NetConfig | None = None):
    """Run the configured strategy; returns (final Checkpoint, loss rows).

    datasets maps domain name -> list of SequenceRecord.  cfg.epochs and
    cfg.lr_hi/lr_lo, when set, override every stage of the plan (the knob
    that shrinks canonical strategies to desk scale).  With out_dir set,
    the latest checkpoint, per-stage snapshots and loss.csv land there.
    A custom net_cfg must agree with cfg on preset and class count.
    """
    if net_cfg is None:
        net_cfg = NetConfig.from_preset(cfg.preset, num_classes=cfg.num_classes)
    elif (net_cfg.backbone.preset != cfg.preset
          or net_cfg.num_classes != cfg.num_classes):
        raise ConfigError(
            f"net config ({net_cfg.backbone.preset}, {net_cfg.num_classes} "
            f"classes) disagrees with train config ({cfg.preset}, "
            f"{cfg.num_classes} classes)"
        )
    stages = apply_strategy(cfg.strategy)
    _check_datasets(stages, datasets)
    params = build_network(net_cfg, seed=cfg.seed)
    data_rng = Rng(cfg.seed + 1)
    m = net_cfg.response_size()
    lambdas = cfg.lambdas()
    rows = []
    epoch_counter = 0
    velocity = params.zeros_like()

    def snapshot():
        return Checkpoint(
            config={"net": net_cfg.to_dict(), "train": asdict(cfg),
                    "epoch": epoch_counter},
            params=params, velocity=velocity, rng_state=data_rng.state(),
        )

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    for stage_idx, stage in enumerate(stages):
        epochs = cfg.epochs if cfg.epochs is not None else stage.epochs
        lr_hi = cfg.lr_hi if cfg.lr_hi is not None else stage.lr_hi
        lr_lo = cfg.lr_lo if cfg.lr_lo is not None else stage.lr_lo
        freeze = _combined_freeze(params, stage.freeze)
        velocity = params.zeros_like()   # momentum never crosses stages
        stream = _stage_stream(stage.data, datasets, data_rng)
        batches = max(1, cfg.pairs_per_epoch // cfg.batch)
        for epoch in range(epochs):
            lr = lr_schedule(epoch, epochs, lr_hi, lr_lo)
            for batch in range(batches):
                pairs = [next(stream) for _ in range(cfg.batch)]
                exemplar, search, class_ids, centers = _batch_arrays(pairs, m)
                out = _forward_checked(params, net_cfg, exemplar, search,
                                       class_ids, centers, lambdas,
                                       epoch_counter, batch)
                grads = out.backward()
                clip_global_norm(grads, cfg.clip_norm)
                sgd_momentum_step(params, grads, velocity, lr, cfg.momentum,
                                  freeze, cfg.weight_decay)
                rows.append((epoch_counter, batch, out.l_dis, out.l_cls,
                             out.l_fin, out.total, lr))
            epoch_counter += 1
            if out_dir:
                save_checkpoint(snapshot(), os.path.join(out_dir, "checkpoint.mmn"))
                write_loss_log(rows, os.path.join(out_dir, "loss.csv"))
        if out_dir:
            save_checkpoint(snapshot(),
                            os.path.join(out_dir, f"stage-{stage_idx + 1}.mmn"))

    ckpt = snapshot()
    if out_dir:
        save_checkpoint(ckpt, os.path.join(out_dir, "checkpoint.mmn"))
        write_loss_log(rows, os.path.join(out_dir, "loss.csv"))
    return ckpt, rows


def fit_pairs(params: ParamSet, net_cfg: NetConfig, pairs, *, steps: int,
              lr_hi: float = 1e-2, lr_lo: float = 1e-3, momentum: float = 0.9,
              lambdas=(1.0, 1.0, 1.0), clip_norm: float = 10.0,
              freeze: dict | None = None, weight_decay: float = 0.0):
    """Overfit harness: step repeatedly on one fixed batch built from pairs.

    Mutates params in place and returns the loss rows (one per step, batch
    column 0), letting callers assert convergence on a pinned workload.
    """
    m = net_cfg.response_size()
    exemplar, search, class_ids, centers = _batch_arrays(pairs, m)
    velocity = params.zeros_like()
    rows = []
    for step in range(steps):
        lr = lr_schedule(step, steps, lr_hi, lr_lo)
        out = _forward_checked(params, net_cfg, exemplar, search, class_ids,
                               centers, lambdas, step, 0)
        grads = out.backward()
        clip_global_norm(grads, clip_norm)
        sgd_momentum_step(params, grads, velocity, lr, momentum, freeze,
                          weight_decay)
        rows.append((step, 0, out.l_dis, out.l_cls, out.l_fin, out.total, lr))
    return rows
