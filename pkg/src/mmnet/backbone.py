"""Padding-free AlexNet-style shared feature extractor.

Five valid convolutions, max pools after the first two, relu on conv1-4 and
a linear conv5 (the matching-template convention: conv5 feeds correlation,
not another layer).  Features are tapped after conv3's relu and after conv5.

Spatial arithmetic with the default 127/255 crops:

    127 -> 59 -> 29 -> 25 -> 12 -> 10 (conv3 tap) -> 8 -> 6  (conv5 tap)
    255 -> 123 -> 61 -> 57 -> 28 -> 26 (conv3 tap) -> 24 -> 22

so both branch response maps downstream come out 17x17.  The total stride
is 8, which is also the response-cell stride used everywhere else.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .params import ParamSet
from .rng import Rng

_PRESET_CHANNELS = {
    "full": (96, 256, 384, 384, 256),
    "desk": (16, 32, 32, 32, 24),
}


@dataclass(frozen=True)
class BackboneConfig:
    preset: str = "desk"
    channels: tuple = ()
    kernel_sizes: tuple = (11, 5, 3, 3, 3)
    strides: tuple = (2, 1, 1, 1, 1)
    pool_after: tuple = (True, True, False, False, False)
    pool_size: int = 3
    pool_stride: int = 2
    in_channels: int = 1
    exemplar_size: int = 127
    search_size: int = 255

    def __post_init__(self):
        if not self.channels:
            if self.preset not in _PRESET_CHANNELS:
                raise ConfigError(f"unknown backbone preset {self.preset!r}")
            object.__setattr__(self, "channels", _PRESET_CHANNELS[self.preset])
        for name in ("channels", "kernel_sizes", "strides", "pool_after"):
            if len(getattr(self, name)) != 5:
                raise ConfigError(f"backbone {name} must list exactly 5 conv layers")
        # no padding anywhere: sizes must stay positive for both crop sizes
        for size in (self.exemplar_size, self.search_size):
            self.tap_sizes(size)

    def tap_sizes(self, input_size: int) -> tuple[int, int]:
        """Spatial side of the conv3 and conv5 taps for a square input."""
        s = input_size
        taps = {}
        for i in range(5):
            s = (s - self.kernel_sizes[i]) // self.strides[i] + 1
            if s <= 0:
                raise ConfigError(
                    f"conv{i + 1} collapses a {input_size} input to size {s}"
                )
            if self.pool_after[i]:
                s = (s - self.pool_size) // self.pool_stride + 1
                if s <= 0:
                    raise ConfigError(
                        f"pool after conv{i + 1} collapses a {input_size} input"
                    )
            if i == 2:
                taps["conv3"] = s
            if i == 4:
                taps["conv5"] = s
        return taps["conv3"], taps["conv5"]

    @property
    def conv3_channels(self) -> int:
        return self.channels[2]

    @property
    def conv5_channels(self) -> int:
        return self.channels[4]


class FeaturePair(NamedTuple):
    conv3: np.ndarray
    conv5: np.ndarray


def build_backbone(cfg: BackboneConfig, seed: int, dtype=np.float32,
                   rng: Rng | None = None, prefix: str = "bb.") -> ParamSet:
    """Fan-in-scaled Gaussian weights (std = sqrt(2/fan_in)), zero biases."""
    rng = rng if rng is not None else Rng(seed)
    params = ParamSet()
    cin = cfg.in_channels
    for i in range(5):
        cout, k = cfg.channels[i], cfg.kernel_sizes[i]
        fan_in = cin * k * k
        std = np.sqrt(2.0 / fan_in)
        w = rng.normal_array((cout, cin, k, k), dtype=dtype) * dtype(std)
        params.add(f"{prefix}conv{i + 1}.w", w.astype(dtype, copy=False))
        params.add(f"{prefix}conv{i + 1}.b", np.zeros(cout, dtype=dtype))
        cin = cout
    return params


def backbone_forward(params: ParamSet, images: np.ndarray, cfg: BackboneConfig,
                     prefix: str = "bb."):
    """Run the stack, tapping conv3 (post-relu) and conv5 (linear).

    Returns ``(FeaturePair, vjp)``; vjp(g_conv3, g_conv5) accumulates both
    cotangents through the shared trunk and returns
    ``(g_images, param_grads_dict)``.
    """
    ops.require_4d("backbone input", images)
    if images.shape[1] != cfg.in_channels:
        raise ShapeError(
            f"backbone expects {cfg.in_channels} input channels, got {images.shape[1]}"
        )
    x = images
    tape = []          # (kind, vjp) in forward order
    tap3 = None
    tap3_depth = None
    for i in range(5):
        w = params[f"{prefix}conv{i + 1}.w"]
        b = params[f"{prefix}conv{i + 1}.b"]
        if x.shape[2] < cfg.kernel_sizes[i] or x.shape[3] < cfg.kernel_sizes[i]:
            raise ShapeError(
                f"conv{i + 1}: input {x.shape[2]}x{x.shape[3]} smaller than "
                f"kernel {cfg.kernel_sizes[i]}"
            )
        x, vjp = ops.conv2d_valid(x, w, b, stride=cfg.strides[i])
        tape.append((f"conv{i + 1}", vjp))
        if i < 4:
            x, vjp = ops.relu(x)
            tape.append(("relu", vjp))
        if cfg.pool_after[i]:
            x, vjp = ops.max_pool2d(x, cfg.pool_size, cfg.pool_stride)
            tape.append(("pool", vjp))
        if i == 2:
            tap3 = x
            tap3_depth = len(tape) - 1  # index of the op whose output is the tap
    feats = FeaturePair(conv3=tap3, conv5=x)

    def vjp(g3, g5):
        grads = {}
        g = g5
        for depth in range(len(tape) - 1, -1, -1):
            kind, back = tape[depth]
            if depth == tap3_depth:
                g = g + g3
            if kind.startswith("conv"):
                g, gw, gb = back(g)
                grads[f"{prefix}{kind}.w"] = gw
                grads[f"{prefix}{kind}.b"] = gb
            else:
                g = back(g)
        return g, grads

    return feats, vjp


_FREEZE_POLICIES = ("none", "first3", "classifier-only", "fine-grained-branch")


def freeze_mask(params: ParamSet, policy: str) -> dict[str, bool]:
    """True entries receive exactly zero update in any optimizer step.

    first3 masks the shared conv1-3; fine-grained-branch masks everything
    owned by the conv3 matching path (FANet and its response gain/bias);
    classifier-only masks the classification head.
    """
    if policy not in _FREEZE_POLICIES:
        raise ConfigError(f"unknown freeze policy {policy!r}")
    prefixes: tuple[str, ...] = ()
    if policy == "first3":
        prefixes = ("bb.conv1.", "bb.conv2.", "bb.conv3.")
    elif policy == "classifier-only":
        prefixes = ("head.cls.",)
    elif policy == "fine-grained-branch":
        prefixes = ("fanet.", "head.fin.")
    return {name: name.startswith(prefixes) if prefixes else False
            for name in params.names()}
