import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abspose.evaluation import (AblationRow, EvaluationError, a_mpjpe, detection_rate, error_histogram, make_report,
                                per_pose_errors, r_mpjpe, write_ablation_csv, write_report_csv)
from abspose.skeleton import Pose3D


def scalar_mpjpe(pred, gt, root=None):
    """Loop-level recomputation with math.sqrt, independent of the vectorized path."""
    total, count = 0.0, 0
    for p, g in zip(pred.tolist(), gt.tolist()):
        pr = p[root] if root is not None else [0.0, 0.0, 0.0]
        gr = g[root] if root is not None else [0.0, 0.0, 0.0]
        for pj, gj in zip(p, g):
            d = [(pj[k] - pr[k]) - (gj[k] - gr[k]) for k in range(3)]
            total += math.sqrt(d[0] ** 2 + d[1] ** 2 + d[2] ** 2)
            count += 1
    return total / count


def test_a_mpjpe_examples():
    gt = np.random.default_rng(0).normal(0, 500, (4, 14, 3)) + [0, 0, 4000]
    assert a_mpjpe(gt, gt) == 0.0
    assert a_mpjpe(gt + [3.0, 4.0, 0.0], gt) == pytest.approx(5.0, abs=1e-12)


def test_r_mpjpe_examples():
    gt = np.random.default_rng(1).normal(0, 500, (4, 14, 3)) + [0, 0, 4000]
    assert r_mpjpe(gt, gt) == 0.0
    assert r_mpjpe(gt + [120.0, -7.0, 900.0], gt) == pytest.approx(0.0, abs=1e-12)
    assert a_mpjpe(gt + [120.0, -7.0, 900.0], gt) > 900


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(0, 13))
def test_metric_oracles(seed, n, root):
    rng = np.random.default_rng(seed)
    gt = rng.normal(0, 400, (n, 14, 3)) + [0, 0, 5000]
    pred = gt + rng.normal(0, 150, gt.shape)
    a, oracle_a = a_mpjpe(pred, gt), scalar_mpjpe(pred, gt)
    r, oracle_r = r_mpjpe(pred, gt, root_index=root), scalar_mpjpe(pred, gt, root)
    assert abs(a - oracle_a) <= 1e-12 * oracle_a
    assert abs(r - oracle_r) <= 1e-12 * oracle_r


def test_matching_pairs():
    rng = np.random.default_rng(2)
    gt = rng.normal(0, 100, (3, 14, 3))
    pred = gt[[2, 0, 1]] + [1.0, 0.0, 0.0]
    assert a_mpjpe(pred, gt, matching=[(0, 2), (1, 0), (2, 1)]) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(EvaluationError):
        a_mpjpe(pred[:0], gt[:0])
    with pytest.raises(EvaluationError):
        a_mpjpe(pred[:2], gt)


def test_pose_objects_are_accepted():
    gt = [Pose3D(np.zeros((14, 3))), Pose3D(np.ones((14, 3)))]
    pred = [Pose3D(np.zeros((14, 3)) + [0, 3, 4]), Pose3D(np.ones((14, 3)) + [0, 3, 4])]
    assert a_mpjpe(pred, gt) == pytest.approx(5.0)


def test_detection_rate_examples():
    assert detection_rate(10, 10) == 1.0
    assert detection_rate(91, 100) == pytest.approx(0.91, abs=1e-12)
    mask = np.zeros(100, dtype=bool)
    mask[:91] = True
    assert detection_rate(mask, 100) == pytest.approx(0.91, abs=1e-12)
    poses = [Pose3D(np.zeros((14, 3)), detected=i < 3) for i in range(4)]
    assert detection_rate(poses, 4) == 0.75
    with pytest.raises(EvaluationError):
        detection_rate(5, 0)
    with pytest.raises(EvaluationError):
        detection_rate(11, 10)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.data())
def test_detection_rate_oracle(n_gt, data):
    k = data.draw(st.integers(0, n_gt))
    assert abs(detection_rate(k, n_gt) - k / n_gt) <= 1e-12


def test_detection_rate_matches_generator_hip_miss():
    from abspose.synthdata import SceneConfig, generate_dataset

    ds = generate_dataset(SceneConfig(), 2000, seed=11)
    rate = detection_rate(ds.detected, len(ds))
    assert abs(rate - 0.97) < 3 * np.sqrt(0.97 * 0.03 / len(ds))


def test_histogram_example():
    h = error_histogram([10, 10, 250], bin_width=100, cap=1000)
    rows = h.to_rows()
    assert rows[0] == (0, 100, 2) and rows[2] == (200, 300, 1)
    assert sum(c for _, _, c in rows) == 3 == h.total


def test_histogram_overflow_and_tail():
    h = error_histogram([0, 49.9, 50, 999.9, 1000, 5000], bin_width=50, cap=1000)
    assert h.counts[0] == 2 and h.counts[1] == 1 and h.counts[19] == 1 and h.counts[-1] == 2
    assert h.mass_above(500) == 3
    assert np.isinf(h.edges[-1][1])
    with pytest.raises(EvaluationError):
        error_histogram([1.0], bin_width=0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 3000), min_size=1, max_size=200))
def test_histogram_total_equals_poses(values):
    h = error_histogram(values)
    assert h.total == len(values)
    assert h.mass_above(1000) == sum(v >= 1000 for v in values)


def test_make_report_and_outputs(tmp_path):
    rng = np.random.default_rng(3)
    gt = rng.normal(0, 300, (6, 14, 3)) + [0, 0, 4000]
    pred = gt + rng.normal(0, 50, gt.shape)
    rep = make_report(pred, gt, 8, scene_ids=[0, 0, 1, 1, 1, 2], label="Ours")
    assert rep.n_poses == 6 and rep.detection_rate == 0.75
    assert rep.histogram.total == 6
    assert rep.per_scene[1]["n_poses"] == 3
    np.testing.assert_allclose(rep.per_scene[1]["a_mpjpe"], per_pose_errors(pred, gt)[2:5].mean())
    rep.write(tmp_path, "eval")
    d = json.loads((tmp_path / "eval.json").read_text())
    assert d["label"] == "Ours" and d["n_poses"] == 6
    with open(tmp_path / "eval.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["method", "A-MPJPE", "R-MPJPE", "Detection Rate"]
    assert rows[1][0] == "Ours" and float(rows[1][1]) == pytest.approx(rep.a_mpjpe, abs=1e-6)
    assert (tmp_path / "eval_histogram.csv").read_text().startswith("bin_low,bin_high,count\n0.000000,50.000000,")


def test_two_row_report(tmp_path):
    gt = np.zeros((2, 14, 3))
    reps = [make_report(gt + 1, gt, 2, label="Baseline"), make_report(gt, gt, 2, label="Ours")]
    write_report_csv(reps, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "method,A-MPJPE,R-MPJPE,Detection Rate"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["Baseline", "Ours"]


def test_ablation_csv(tmp_path):
    rows = [AblationRow("L2 loss", 400.0, "l2", False, False, False, False, [401.0, 399.0]),
            AblationRow("broken", float("nan"), "l1", True, True, True, True, [], "RuntimeError: a, b")]
    write_ablation_csv(rows, tmp_path / "a.csv")
    with open(tmp_path / "a.csv") as fh:
        parsed = list(csv.reader(fh))
    assert parsed[1][:3] == ["L2 loss", "400.000000", "l2"] and parsed[1][7] == "401.000000;399.000000"
    assert parsed[2][-1] == "RuntimeError: a, b"
    with pytest.raises(EvaluationError):
        write_ablation_csv(rows + rows[:1], tmp_path / "b.csv")
