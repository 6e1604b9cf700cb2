import copy
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abspose.neural import CheckpointError, Mode, l1_loss, save_checkpoint
from abspose.pipeline import (UNBOUNDED_DEPTH_MM, ConfigConflict, PoseNet, PoseNetConfig, TrainingData,
                              augment_detections, baseline_predict, baseline_predict_batch, build_features,
                              decode_prediction, encode_target, iterate_batches, predict_direct, train_stage1,
                              train_stage2)
from abspose.skeleton import DEFAULT_JOINTS, RootMissing
from abspose.synthdata import SceneConfig, generate_dataset

TINY = PoseNetConfig(hidden_width=32, epochs=3, batch_size=64, dropout=0.1)


@pytest.fixture(scope="module")
def small_data():
    return TrainingData.from_dataset(generate_dataset(SceneConfig(), 40, seed=21))


# -- features and targets --


def test_feature_layout_degenerate_pose():
    xy = np.tile([0.1, -0.2], (14, 1))
    f = build_features(xy, np.ones(14, bool), np.zeros(14))
    assert f.shape == (42,)
    assert np.all(f[:26] == 0) and f[26:28].tolist() == [0.1, -0.2] and np.all(f[28:] == 0)
    assert build_features(xy, np.ones(14, bool), np.zeros(14), use_depth=False).shape == (28,)


def test_feature_imputation_for_missed_joints():
    rng = np.random.default_rng(0)
    xy = rng.normal(0, 0.2, (14, 2))
    vis = np.ones(14, bool)
    vis[5] = False
    xy[5] = np.nan
    depth = rng.uniform(7, 9, 14)
    depth[5] = np.nan
    f = build_features(xy, vis, depth)
    # joint 5 is the fifth non-root joint
    assert f[8:10].tolist() == [0.0, 0.0]
    assert f[28 + 5] == depth[0]
    assert np.all(np.isfinite(f))
    np.testing.assert_array_equal(f[:2], xy[1] - xy[0])


def test_features_reject_missing_root():
    vis = np.ones(14, bool)
    vis[0] = False
    with pytest.raises(RootMissing):
        build_features(np.zeros((14, 2)), vis, np.zeros(14))


def test_decode_known_values():
    pred = np.zeros(42)
    pred[41] = np.log(5000)
    out = decode_prediction(pred)
    np.testing.assert_allclose(out, np.tile([0, 0, 5000.0], (14, 1)), rtol=1e-12)
    pred[41] = -50
    assert decode_prediction(pred)[0, 2] > 0


def test_encode_known_values_and_oracle():
    xyz = np.zeros((14, 3))
    xyz[:, 2] = 1000
    enc = encode_target(xyz)
    assert enc[41] == pytest.approx(math.log(1000), abs=1e-15)
    assert np.all(enc[:41] == 0)
    rng = np.random.default_rng(1)
    pose = rng.normal(0, 300, (14, 3)) + [200, -100, 4500]
    enc = encode_target(pose)
    k = 0
    for j in range(1, 14):
        for c in range(3):
            assert enc[k] == pose[j][c] - pose[0][c]
            k += 1
    assert enc[39:41].tolist() == pose[0, :2].tolist() and enc[41] == math.log(pose[0, 2])
    lin = encode_target(pose, log_hip_z=False)
    assert lin[41] == pose[0, 2]
    assert encode_target(pose, relative_only=True).shape == (39,)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_encode_decode_round_trip(seed, log_z):
    rng = np.random.default_rng(seed)
    poses = rng.normal(0, 400, (5, 14, 3)) + [0, 0, rng.uniform(2000, 8000)]
    back = decode_prediction(encode_target(poses, log_hip_z=log_z), log_hip_z=log_z)
    assert np.max(np.abs(back - poses) / np.abs(poses).max()) < 1e-9


def test_relative_only_decode_uses_hip():
    rel = encode_target(np.random.default_rng(2).normal(0, 300, (14, 3)), relative_only=True)
    out = decode_prediction(rel, relative_only=True, hip=[1.0, 2.0, 3000.0])
    assert out[0].tolist() == [1.0, 2.0, 3000.0]


# -- configuration --


def test_config_conflicts():
    with pytest.raises(ConfigConflict):
        PoseNetConfig(stage2=True, use_depth_features=False)
    with pytest.raises(ConfigConflict):
        PoseNetConfig(batch_size=1)
    with pytest.raises(ConfigConflict):
        PoseNetConfig(loss="huber")
    cfg = PoseNetConfig(hidden_width=64, loss="l2")
    assert PoseNetConfig.from_dict(cfg.to_dict()) == cfg


# -- network --


def test_posenet_shapes_and_determinism():
    net = PoseNet(PoseNetConfig(hidden_width=32), seed=0)
    x = np.random.default_rng(0).standard_normal((7, 42))
    y = net.forward(x)
    assert y.shape == (7, 42)
    assert np.array_equal(y, net.forward(x))
    assert PoseNet(PoseNetConfig(hidden_width=32, relative_only=True, use_depth_features=False)).forward(
        np.zeros((3, 28))).shape == (3, 39)


def test_posenet_checkpoint_round_trip(tmp_path, small_data):
    net, _ = train_stage1(TINY, small_data, seed=0)
    net.save(tmp_path / "n.ckpt")
    back = PoseNet.load(tmp_path / "n.ckpt")
    assert back.config == net.config
    feats = small_data.features(True)
    assert np.array_equal(back.predict(feats), net.predict(feats))
    save_checkpoint(tmp_path / "bare.ckpt", {"w": np.zeros(2)})
    with pytest.raises(CheckpointError):
        PoseNet.load(tmp_path / "bare.ckpt")


def test_overfit_fifty_samples():
    # memorization check: regularization switched off so the train loss can approach zero
    data = TrainingData.from_dataset(generate_dataset(SceneConfig(), 20, seed=0)).subset(np.arange(50))
    start = time.perf_counter()
    _, hist = train_stage1(PoseNetConfig(hidden_width=256, epochs=200, dropout=0.0), data, seed=0)
    elapsed = time.perf_counter() - start
    assert hist.losses[-1] < 0.1 * hist.losses[0]
    assert elapsed < 60


def test_training_loss_is_finite_across_seeds(small_data):
    for seed in range(3):
        _, hist = train_stage1(TINY, small_data, seed=seed)
        assert np.all(np.isfinite(hist.losses))


def test_identical_seeds_give_identical_checkpoints(tmp_path, small_data):
    cfg = PoseNetConfig(hidden_width=32, epochs=2, batch_size=32, augmentation=True)
    for name in ("a", "b"):
        net, _ = train_stage1(cfg, small_data, seed=5)
        net.save(tmp_path / f"{name}.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    net, _ = train_stage1(cfg, small_data, seed=6)
    net.save(tmp_path / "c.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() != (tmp_path / "c.ckpt").read_bytes()


def test_batches_cover_everything_and_merge_singletons():
    rng = np.random.default_rng(0)
    b = iterate_batches(61, 30, rng)
    assert [len(x) for x in b] == [30, 31]
    assert sorted(np.concatenate(b).tolist()) == list(range(61))
    assert [len(x) for x in iterate_batches(62, 30, rng)] == [30, 30, 2]


def test_learning_rate_decays_in_history(small_data):
    _, hist = train_stage1(replace_epochs(TINY, 9), small_data)
    lrs = [r["lr"] for r in hist.rows]
    assert lrs[:4] == [1e-3] * 4 and lrs[4] == pytest.approx(9.6e-4) and lrs[8] == pytest.approx(1e-3 * 0.96**2)


def replace_epochs(cfg, n):
    return PoseNetConfig.from_dict({**cfg.to_dict(), "epochs": n})


# -- stage 2 --


def test_stage2_identity_init_and_step_count(small_data):
    net, hist = train_stage1(TINY, small_data, seed=0)
    feats = small_data.features(True)
    before = net.forward(feats)
    net.train_recalibration = True
    assert np.array_equal(net.forward(feats), before)
    net.train_recalibration = False
    steps_before = hist.steps
    n = len(small_data)
    assert n % 30 != 1
    cfg = PoseNetConfig.from_dict({**TINY.to_dict(), "stage2": True})
    net2, hist = train_stage2(cfg, small_data, copy.deepcopy(net), seed=0, history=hist)
    assert hist.steps - steps_before == 5 * math.ceil(n / 30)
    assert [r["stage"] for r in hist.rows].count(2) == 5
    assert net2.config.stage2 and not TINY.stage2
    assert not np.array_equal(net2.recalib.offset.value, np.zeros(14))


def test_stage2_resets_adam_state(small_data):
    net, _ = train_stage1(TINY, small_data, seed=0)
    assert all(p.step > 0 for p in net.core.parameters())
    cfg = PoseNetConfig.from_dict({**TINY.to_dict(), "stage2": True, "stage2_epochs": 1})
    n = len(small_data)
    net2, _ = train_stage2(cfg, small_data, net, seed=0)
    assert all(p.step == math.ceil(n / 30) for p in net2.parameters())


def test_stage2_needs_depth(small_data):
    cfg = PoseNetConfig.from_dict({**TINY.to_dict(), "use_depth_features": False})
    net, _ = train_stage1(cfg, small_data, seed=0)
    with pytest.raises(ConfigConflict):
        train_stage2(TINY, small_data, net)


# -- augmentation --


def test_augmentation_off_and_noise_scale(small_data):
    cfg = PoseNetConfig(aug_prob=0.0)
    same = augment_detections(small_data, cfg, np.random.default_rng(0))
    assert np.array_equal(same, small_data.xy_norm, equal_nan=True)
    cfg = PoseNetConfig(aug_prob=1.0, aug_zoom_min=2.0, aug_zoom_max=2.0, aug_sigma_px=4.0)
    out = augment_detections(small_data, cfg, np.random.default_rng(1))
    exact = small_data.xyz[..., :2] / small_data.xyz[..., 2:3]
    resid = ((out - exact) * small_data.fx[:, None, None] * 2.0)[small_data.visible]
    assert resid.std() == pytest.approx(4.0, rel=0.05)
    assert np.array_equal(np.isnan(out[..., 0]), ~small_data.visible)


# -- baseline --


def test_baseline_exact_with_true_relative_pose():
    rng = np.random.default_rng(3)
    for _ in range(20):
        rel = rng.normal(0, 300, (14, 3))
        rel[0] = 0
        t = np.array([rng.uniform(-1000, 1000), rng.uniform(-500, 500), rng.uniform(2000, 8000)])
        xy = (rel[:, :2] + t[:2]) / t[2]
        pose = baseline_predict(xy, np.ones(14, bool), rel)
        np.testing.assert_allclose(pose.xyz, rel + t, rtol=1e-9, atol=1e-9 * t[2])
        assert not pose.unbounded_translation


def test_baseline_uses_visible_joints_only():
    rng = np.random.default_rng(4)
    rel = rng.normal(0, 300, (14, 3))
    rel[0] = 0
    t = np.array([100.0, 50.0, 4000.0])
    xy = (rel[:, :2] + t[:2]) / t[2]
    vis = np.ones(14, bool)
    vis[[3, 7]] = False
    xy[[3, 7]] = np.nan
    np.testing.assert_allclose(baseline_predict(xy, vis, rel).xyz, rel + t, rtol=1e-9)


def test_baseline_degenerate_is_flagged():
    rel = np.zeros((14, 3))
    rel[:, 2] = np.arange(14) * 10.0
    xy = np.tile([0.05, -0.1], (14, 1))
    pose = baseline_predict(xy, np.ones(14, bool), rel)
    assert pose.unbounded_translation
    assert pose.xyz[0, 2] == UNBOUNDED_DEPTH_MM
    np.testing.assert_allclose(pose.xyz[0, :2], [0.05 * UNBOUNDED_DEPTH_MM, -0.1 * UNBOUNDED_DEPTH_MM])


def test_baseline_batch_and_shared_detection_filter(small_data):
    cfg = PoseNetConfig(hidden_width=32, epochs=2, batch_size=64, relative_only=True, use_depth_features=False)
    rel_net, _ = train_stage1(cfg, small_data, seed=0)
    res = baseline_predict_batch(rel_net, small_data)
    assert res.xyz.shape == small_data.xyz.shape and res.unbounded.dtype == bool
    direct, _ = train_stage1(TINY, small_data, seed=0)
    assert predict_direct(direct, small_data).shape == res.xyz.shape
    with pytest.raises(ConfigConflict):
        baseline_predict_batch(direct, small_data)
    gt_rel = small_data.xyz - small_data.xyz[:, :1]
    exact = baseline_predict_batch(rel_net, small_data, rel_override=gt_rel)
    assert np.median(np.linalg.norm(exact.xyz[:, 0] - small_data.xyz[:, 0], axis=1)) < 400


def test_loss_in_standardized_space_matches_history(small_data):
    cfg = PoseNetConfig(hidden_width=32, epochs=1, batch_size=10**6, dropout=0.0)
    net, hist = train_stage1(cfg, small_data, seed=0)
    fresh = PoseNet(cfg, seed=0)
    fresh.fit_normalization(small_data.features(True), small_data.targets(cfg))
    y = (small_data.targets(cfg) - fresh.out_mean) / fresh.out_std
    first, _ = l1_loss(fresh.forward(small_data.features(True), Mode.TRAIN), y)
    assert hist.losses[0] == pytest.approx(first, rel=1e-12)
