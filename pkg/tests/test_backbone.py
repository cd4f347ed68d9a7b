"""Backbone tests: tap arithmetic, presets, covariance, freeze policies."""

import numpy as np
import pytest

from mmnet.backbone import BackboneConfig, backbone_forward, build_backbone, freeze_mask
from mmnet.errors import ConfigError, ShapeError
from mmnet.gradcheck import grad_check
from mmnet.params import ParamSet
from mmnet.rng import Rng


def full_param_count():
    """Hand arithmetic over the five full-preset conv layers."""
    chans = [1, 96, 256, 384, 384, 256]
    kerns = [11, 5, 3, 3, 3]
    total = 0
    for i, k in enumerate(kerns):
        total += chans[i + 1] * chans[i] * k * k + chans[i + 1]
    return total


def test_build_is_deterministic():
    cfg = BackboneConfig(preset="desk")
    a = build_backbone(cfg, seed=5)
    b = build_backbone(cfg, seed=5)
    for name in a.names():
        np.testing.assert_array_equal(a[name], b[name])
    c = build_backbone(cfg, seed=6)
    assert not np.array_equal(a["bb.conv1.w"], c["bb.conv1.w"])


def test_desk_channels():
    cfg = BackboneConfig(preset="desk")
    params = build_backbone(cfg, seed=0)
    got = [params[f"bb.conv{i}.w"].shape[0] for i in range(1, 6)]
    assert got == [16, 32, 32, 32, 24]


def test_full_param_count_matches_hand_arithmetic():
    cfg = BackboneConfig(preset="full")
    params = build_backbone(cfg, seed=0)
    assert params.size() == full_param_count() == 3723968


def test_tap_sizes_127_255():
    cfg = BackboneConfig(preset="desk")
    params = build_backbone(cfg, seed=1)
    for side, (s3, s5) in ((127, (10, 6)), (255, (26, 22))):
        x = Rng(2).normal_array((1, 1, side, side), dtype=np.float32)
        (f3, f5), _ = backbone_forward(params, x, cfg)
        assert f3.shape == (1, 32, s3, s3)
        assert f5.shape == (1, 24, s5, s5)


def test_zero_input_zero_taps():
    cfg = BackboneConfig(preset="desk")
    params = build_backbone(cfg, seed=3)
    (f3, f5), _ = backbone_forward(params, np.zeros((1, 1, 127, 127)), cfg)
    assert not f3.any()
    assert not f5.any()


def test_translation_covariance_one_cell():
    # shifting the input by the total stride (8 px) shifts conv5 by 1 cell
    cfg = BackboneConfig(preset="desk")
    params = build_backbone(cfg, seed=4).astype(np.float64)
    base = Rng(9).normal_array((1, 1, 263, 263))
    x0 = base[:, :, :255, :255]
    x1 = base[:, :, 8:, 8:]
    (_, f0), _ = backbone_forward(params, x0, cfg)
    (_, f1), _ = backbone_forward(params, x1, cfg)
    np.testing.assert_allclose(f1[0, :, :-1, :-1], f0[0, :, 1:, 1:], atol=1e-10)


def test_forward_rejects_undersized_input():
    cfg = BackboneConfig(preset="desk")
    params = build_backbone(cfg, seed=5)
    with pytest.raises(ShapeError):
        backbone_forward(params, np.zeros((1, 1, 16, 16)), cfg)


def test_config_rejects_degenerate_chain():
    with pytest.raises(ConfigError):
        BackboneConfig(preset="desk", exemplar_size=32, search_size=255)


def test_backward_grad_check():
    cfg = BackboneConfig(preset="desk", exemplar_size=103, search_size=111)
    params = build_backbone(cfg, seed=6, dtype=np.float64)
    x = Rng(8).normal_array((1, 1, 103, 103))
    r3 = Rng(10).normal_array((1, 32, 7, 7))
    r5 = Rng(11).normal_array((1, 24, 3, 3))

    def f(p):
        (f3, f5), vjp = backbone_forward(p, x, cfg)
        loss = float((f3 * r3).sum() + (f5 * r5).sum())
        _, grads = vjp(r3, r5)
        return loss, grads

    # eps must stay below this seed's closest relu-kink distance (6e-6 at conv1)
    assert grad_check(f, params, eps=1e-6, coords_per_tensor=6) < 1e-4


def test_freeze_mask_policies():
    cfg = BackboneConfig(preset="desk")
    params = build_backbone(cfg, seed=7)
    params.add("fanet.delta", np.zeros(()))
    params.add("head.cls.w", np.zeros((4, 24, 1, 1)))
    params.add("head.fin.gain", np.full((), 1e-3))

    mask = freeze_mask(params, "none")
    assert not any(mask.values())

    mask = freeze_mask(params, "first3")
    frozen = {n for n, v in mask.items() if v}
    assert frozen == {f"bb.conv{i}.{s}" for i in (1, 2, 3) for s in ("w", "b")}

    mask = freeze_mask(params, "classifier-only")
    assert {n for n, v in mask.items() if v} == {"head.cls.w"}

    mask = freeze_mask(params, "fine-grained-branch")
    assert {n for n, v in mask.items() if v} == {"fanet.delta", "head.fin.gain"}

    with pytest.raises(ConfigError):
        freeze_mask(params, "everything")
