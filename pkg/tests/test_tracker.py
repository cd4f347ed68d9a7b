"""Tracking-loop tests: upsampling, fusion, pyramid, templates, trajectory."""

import numpy as np
import pytest

from mmnet.dataio import SynthSpec, synth_sequence
from mmnet.errors import ConfigError, FormatError, InputError
from mmnet.network import NetConfig, build_network
from mmnet.rng import Rng
from mmnet.tracker import (TrackerConfig, branch_responses, catmull_rom_matrix,
                           fuse_responses, init_session, read_trajectory,
                           track_frame, track_sequence, update_template,
                           upsample_response, write_trajectory)
from mmnet.trainer import Checkpoint


def cubic_kernel(t):
    """Keys' bicubic kernel, a = -0.5 (reference implementation)."""
    t = abs(t)
    if t <= 1.0:
        return (1.5 * t - 2.5) * t * t + 1.0
    if t < 2.0:
        return ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    return 0.0


def upsample_loop_oracle(r, factor):
    """Direct 2-D interpolation with clamped taps, no matrix algebra."""
    n = r.shape[0]
    n_out = (n - 1) * factor + 1
    out = np.zeros((n_out, n_out))
    for oi in range(n_out):
        for oj in range(n_out):
            si, sj = oi / factor, oj / factor
            acc = 0.0
            for a in range(int(np.floor(si)) - 1, int(np.floor(si)) + 3):
                for b in range(int(np.floor(sj)) - 1, int(np.floor(sj)) + 3):
                    w = cubic_kernel(si - a) * cubic_kernel(sj - b)
                    acc += w * r[min(max(a, 0), n - 1), min(max(b, 0), n - 1)]
            out[oi, oj] = acc
    return out


def iou_ref(a, b):
    x1, y1 = max(a[0], b[0]), max(a[1], b[1])
    x2 = min(a[0] + a[2], b[0] + b[2])
    y2 = min(a[1] + a[3], b[1] + b[3])
    inter = max(0.0, x2 - x1) * max(0.0, y2 - y1)
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


@pytest.fixture(scope="module")
def ckpt():
    """Random-init desk model with response gains raised to a useful range.

    The correlation-filter block localizes even without trained conv weights;
    the default 1e-3 head gains just drown the response under the additive
    cosine window, so this fixture calibrates them to 0.3.
    """
    net_cfg = NetConfig.from_preset("desk")
    params = build_network(net_cfg, seed=7)
    params["head.dis.gain"] = np.asarray(0.3, dtype=np.float32)
    params["head.fin.gain"] = np.asarray(0.3, dtype=np.float32)
    return Checkpoint(config={"net": net_cfg.to_dict(), "epoch": 0},
                      params=params, velocity=params.zeros_like(),
                      rng_state=Rng(0).state())


def center_error(box, gt):
    return float(np.hypot(box[0] + box[2] / 2 - (gt[0] + gt[2] / 2),
                          box[1] + box[3] / 2 - (gt[1] + gt[3] / 2)))


# ---------------------------------------------------------------- upsampling


def test_catmull_matrix_grid_points_exact():
    mat = catmull_rom_matrix(17, 16)
    assert mat.shape == (257, 17)
    for k in range(17):
        row = np.zeros(17)
        row[k] = 1.0
        np.testing.assert_allclose(mat[16 * k], row, atol=1e-12)


def test_catmull_matrix_partition_of_unity():
    mat = catmull_rom_matrix(17, 16)
    np.testing.assert_allclose(mat.sum(axis=1), 1.0, atol=1e-12)


def test_catmull_matrix_halfway_weights():
    # s = 1.5 uses taps 0..3 with the classic (-1, 9, 9, -1)/16 stencil
    mat = catmull_rom_matrix(17, 16)
    np.testing.assert_allclose(mat[24, :4], [-0.0625, 0.5625, 0.5625, -0.0625],
                               atol=1e-12)
    assert np.all(mat[24, 4:] == 0.0)


def test_catmull_reproduces_quadratics_in_interior():
    mat = catmull_rom_matrix(17, 16)
    k = np.arange(17.0)
    up = mat @ ((k - 8.0) ** 2)
    o = np.arange(257.0) / 16.0
    interior = (o >= 1.0) & (o <= 15.0)
    np.testing.assert_allclose(up[interior], (o[interior] - 8.0) ** 2, atol=1e-9)


def test_upsample_matches_loop_oracle():
    rng = Rng(60)
    r = rng.normal_array((5, 5))
    mat = catmull_rom_matrix(5, 4)
    got = upsample_response(r, mat)
    want = upsample_loop_oracle(r, 4)
    assert got.shape == (17, 17)
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_upsample_input_validation():
    mat = catmull_rom_matrix(5, 4)
    with pytest.raises(InputError):
        upsample_response(np.zeros((5, 6)), mat)
    with pytest.raises(InputError):
        catmull_rom_matrix(1, 4)


# -------------------------------------------------------------------- config


def test_tracker_config_validation():
    with pytest.raises(ConfigError):
        TrackerConfig(scales=2)
    with pytest.raises(ConfigError):
        TrackerConfig(scales=-1)
    with pytest.raises(ConfigError):
        TrackerConfig(scale_step=0.0)
    with pytest.raises(ConfigError):
        TrackerConfig(scale_penalty=1.5)
    with pytest.raises(ConfigError):
        TrackerConfig(beta=-0.1)
    with pytest.raises(ConfigError):
        TrackerConfig(template_mode="latest")
    with pytest.raises(ConfigError):
        TrackerConfig(response_upsample=0)


# ------------------------------------------------------------------- session


def test_session_drops_classifier(ckpt):
    spec = SynthSpec(frames=2, size=128, target_size=16)
    rec = synth_sequence(spec, seed=61)
    session = init_session(ckpt, rec.frames[0], rec.boxes[0])
    names = session.params.names()
    assert not any(n.startswith("head.cls.") for n in names)
    assert any(n.startswith("bb.") for n in names)
    assert any(n.startswith("fanet.") for n in names)
    assert "head.dis.gain" in names and "head.fin.bias" in names


def test_session_reinit_deterministic(ckpt):
    rec = synth_sequence(SynthSpec(frames=2, size=128, target_size=16), seed=62)
    s1 = init_session(ckpt, rec.frames[0], rec.boxes[0])
    s2 = init_session(ckpt, rec.frames[0], rec.boxes[0])
    np.testing.assert_array_equal(s1.t5, s2.t5)
    np.testing.assert_array_equal(s1.t3, s2.t3)
    np.testing.assert_array_equal(s1.box, s2.box)
    assert s1.scale == s2.scale == 1.0


def test_session_input_validation(ckpt):
    frame = np.zeros((64, 64), np.uint8)
    with pytest.raises(InputError):
        init_session(ckpt, frame, [10, 10, 0, 5])
    bad = Checkpoint(config={"epoch": 0}, params=ckpt.params,
                     velocity=ckpt.velocity, rng_state=ckpt.rng_state)
    with pytest.raises(FormatError):
        init_session(bad, frame, [10, 10, 20, 20])


def test_weights_frozen_and_templates_constant_in_first_mode(ckpt):
    rec = synth_sequence(SynthSpec(frames=5, size=128, target_size=16), seed=63)
    session = init_session(ckpt, rec.frames[0], rec.boxes[0])
    w0 = {n: session.params[n].copy() for n in session.params.names()}
    t5_0, t3_0 = session.t5.copy(), session.t3.copy()
    for frame in rec.frames[1:]:
        track_frame(session, frame)
    for n, arr in w0.items():
        np.testing.assert_array_equal(session.params[n], arr)
    np.testing.assert_array_equal(session.t5, t5_0)
    np.testing.assert_array_equal(session.t3, t3_0)


# ------------------------------------------------------------------ tracking


def test_static_target_stays_within_2px(ckpt):
    spec = SynthSpec(frames=12, size=256, target_size=24, noise_std=0.0,
                     speed=0.0, wobble=0.0)
    rec = synth_sequence(spec, seed=64)
    boxes, scores, _ = track_sequence(ckpt, rec.frames, rec.boxes[0])
    for box, gt in zip(boxes, rec.boxes):
        assert center_error(box, gt) <= 2.0


def test_linear_motion_mean_iou(ckpt):
    spec = SynthSpec(frames=100, size=256, target_size=24, noise_std=1.0,
                     speed=3.0, wobble=0.0)
    rec = synth_sequence(spec, seed=65)
    boxes, _, fps = track_sequence(ckpt, rec.frames, rec.boxes[0])
    ious = [iou_ref(b, g) for b, g in zip(boxes, rec.boxes)]
    assert np.mean(ious) >= 0.5
    assert fps > 5.0  # informational throughput floor on the desk preset


def test_beta_extremes_produce_valid_boxes(ckpt):
    rec = synth_sequence(SynthSpec(frames=5, size=192, target_size=20), seed=66)
    for beta in (0.0, 1.0):
        cfg = TrackerConfig(beta=beta)
        boxes, scores, _ = track_sequence(ckpt, rec.frames, rec.boxes[0], cfg)
        assert np.isfinite(boxes).all()
        assert (boxes[:, 2] > 0).all() and (boxes[:, 3] > 0).all()


def test_fusion_sum_is_twice_the_mix_exactly(ckpt):
    rec = synth_sequence(SynthSpec(frames=2, size=192, target_size=20), seed=67)
    session = init_session(ckpt, rec.frames[0], rec.boxes[0])
    rng = Rng(68)
    crops = rng.uniform_array((3, 1, 255, 255), dtype=np.float32)
    r_dis, r_fin = branch_responses(session, crops)
    mix = fuse_responses(r_dis, r_fin, 0.5)
    total = r_dis.astype(np.float64) + r_fin.astype(np.float64)
    np.testing.assert_array_equal(2.0 * mix, total)


def test_scale_step_one_collapses_to_single_scale(ckpt):
    rec = synth_sequence(SynthSpec(frames=6, size=192, target_size=20), seed=69)
    cfg3 = TrackerConfig(scales=3, scale_step=1.0)
    cfg1 = TrackerConfig(scales=1)
    b3, s3, _ = track_sequence(ckpt, rec.frames, rec.boxes[0], cfg3)
    b1, s1, _ = track_sequence(ckpt, rec.frames, rec.boxes[0], cfg1)
    np.testing.assert_array_equal(b3, b1)
    np.testing.assert_array_equal(s3, s1)


def test_small_frame_mean_padded(ckpt):
    # frame far smaller than the 255 search window: pad rule must hold
    frame = np.full((64, 64), 30, np.uint8)
    frame[20:40, 20:40] = 220
    session = init_session(ckpt, frame, [20, 20, 20, 20])
    box, score = track_frame(session, frame)
    assert np.isfinite(box).all() and np.isfinite(score)


# ------------------------------------------------------------------ template


def test_update_template_modes(ckpt):
    rec = synth_sequence(SynthSpec(frames=3, size=192, target_size=20), seed=70)

    def fresh(mode, rate=0.5):
        cfg = TrackerConfig(template_mode=mode, ema_rate=rate)
        return init_session(ckpt, rec.frames[0], rec.boxes[0], cfg)

    rng = Rng(71)
    new_f5 = rng.normal_array(fresh("previous").f5.shape, dtype=np.float32)
    new_f3 = rng.normal_array(fresh("previous").f3.shape, dtype=np.float32)

    prev = fresh("previous")
    update_template(prev, new_f5, new_f3)
    np.testing.assert_array_equal(prev.f5, new_f5)

    ema0 = fresh("ema", rate=0.0)
    f5_before = ema0.f5.copy()
    t5_before = ema0.t5.copy()
    update_template(ema0, new_f5, new_f3)
    np.testing.assert_array_equal(ema0.f5, f5_before)
    np.testing.assert_array_equal(ema0.t5, t5_before)

    ema1 = fresh("ema", rate=1.0)
    update_template(ema1, new_f5, new_f3)
    np.testing.assert_array_equal(ema1.f5, prev.f5)
    np.testing.assert_array_equal(ema1.t5, prev.t5)

    ema_half = fresh("ema", rate=0.5)
    f0 = ema_half.f5.copy()
    update_template(ema_half, new_f5, new_f3)
    np.testing.assert_allclose(ema_half.f5, 0.5 * f0 + 0.5 * new_f5, atol=1e-6)


def test_update_template_first_mode_warns(ckpt):
    rec = synth_sequence(SynthSpec(frames=2, size=192, target_size=20), seed=72)
    session = init_session(ckpt, rec.frames[0], rec.boxes[0])
    t5_before = session.t5.copy()
    with pytest.warns(UserWarning):
        update_template(session, session.f5 * 2.0, session.f3 * 2.0)
    np.testing.assert_array_equal(session.t5, t5_before)


def test_ema_tracking_still_localizes(ckpt):
    spec = SynthSpec(frames=30, size=256, target_size=24, noise_std=1.0,
                     speed=2.0, wobble=0.0)
    rec = synth_sequence(spec, seed=73)
    cfg = TrackerConfig(template_mode="ema", ema_rate=0.01)
    boxes, _, _ = track_sequence(ckpt, rec.frames, rec.boxes[0], cfg)
    ious = [iou_ref(b, g) for b, g in zip(boxes, rec.boxes)]
    assert np.mean(ious) >= 0.5


# ---------------------------------------------------------------- trajectory


def test_trajectory_roundtrip(tmp_path, ckpt):
    rec = synth_sequence(SynthSpec(frames=4, size=128, target_size=16), seed=74)
    boxes, scores, _ = track_sequence(ckpt, rec.frames, rec.boxes[0])
    path = str(tmp_path / "traj.csv")
    write_trajectory(boxes, scores, path)
    lines = open(path).read().strip().split("\n")
    assert lines[0] == "frame_index,x,y,w,h,score"
    assert len(lines) == 1 + len(boxes)
    back_boxes, back_scores = read_trajectory(path)
    np.testing.assert_allclose(back_boxes, boxes, atol=1e-6)
    np.testing.assert_allclose(back_scores, scores, atol=1e-6)
    assert back_scores[0] == 1.0


def test_trajectory_format_errors(tmp_path):
    path = str(tmp_path / "bad.csv")
    with open(path, "w") as fh:
        fh.write("frame,x,y\n")
    with pytest.raises(FormatError):
        read_trajectory(path)
    with open(path, "w") as fh:
        fh.write("frame_index,x,y,w,h,score\n1,0,0,5,5,0.5\n")
    with pytest.raises(FormatError):
        read_trajectory(path)
    with open(path, "w") as fh:
        fh.write("frame_index,x,y,w,h,score\n")
    with pytest.raises(FormatError):
        read_trajectory(path)
    with pytest.raises(InputError):
        write_trajectory(np.zeros((3, 4)), np.zeros(2), str(tmp_path / "t.csv"))
