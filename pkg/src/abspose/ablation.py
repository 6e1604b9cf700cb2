"""Experiment harnesses: the component ladder, direct-vs-baseline comparison and the corruption suite."""

from __future__ import annotations

import copy
import logging
from dataclasses import replace

import numpy as np

from .evaluation import AblationRow, EvalReport, make_report, per_pose_errors
from .pipeline import (PoseNetConfig, TrainingData, baseline_predict_batch, predict_direct, train_stage1,
                       train_stage2)
from .skeleton import JointSet
from .synthdata import PoseDataset, contaminate_targets

log = logging.getLogger(__name__)

# label -> config overrides, applied cumulatively
LADDER = (
    ("L2 loss", dict(loss="l2", use_depth_features=False, log_hip_z=False, augmentation=False)),
    ("w/ L1 loss", dict(loss="l1")),
    ("w/ depth features", dict(use_depth_features=True)),
    ("log hip z", dict(log_hip_z=True)),
    ("augmentation", dict(augmentation=True)),
    ("stage-2 (recalibration stand-in)", dict(stage2=True)),
)


def _training_data(ds: PoseDataset, outlier_fraction: float, seed: int) -> TrainingData:
    if outlier_fraction <= 0:
        return TrainingData.from_dataset(ds)
    targets, _ = contaminate_targets(ds.xyz, outlier_fraction, np.random.default_rng([seed, 99]))
    return TrainingData.from_dataset(ds, targets=targets)


def run_ablation(train: PoseDataset, test: PoseDataset, base: PoseNetConfig, seeds=(0, 1, 2),
                 outlier_fraction: float = 0.0, on_row=None) -> list[AblationRow]:
    """Train and evaluate the cumulative component ladder; each row is the median A-MPJPE over ``seeds``.

    The stage-2 row fine-tunes the previous row's networks. A failing row is
    recorded with its error and the remaining rows still run.
    """
    train_data = _training_data(train, outlier_fraction, 0)
    test_data = TrainingData.from_dataset(test)
    rows = []
    cfg = replace(base, stage2=False)
    prev_nets: dict[int, object] = {}
    for label, overrides in LADDER:
        cfg = replace(cfg, **overrides)
        values, nets, error = [], {}, ""
        try:
            for seed in seeds:
                if cfg.stage2:
                    if seed not in prev_nets:
                        raise RuntimeError("previous row produced no network to fine-tune")
                    net, _ = train_stage2(cfg, train_data, copy.deepcopy(prev_nets[seed]), seed)
                else:
                    net, _ = train_stage1(cfg, train_data, seed)
                nets[seed] = net
                values.append(float(np.mean(per_pose_errors(predict_direct(net, test_data), test_data.xyz))))
        except Exception as exc:  # noqa: BLE001 - a failed row must not stop the ladder
            log.warning("ablation row %r failed: %s", label, exc)
            error = f"{type(exc).__name__}: {exc}"
        prev_nets = nets
        row = AblationRow(label, float(np.median(values)) if values and not error else float("nan"), cfg.loss,
                          cfg.use_depth_features, cfg.log_hip_z, cfg.augmentation, cfg.stage2, values, error)
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows


def baseline_config(config: PoseNetConfig, use_depth_features: bool = False) -> PoseNetConfig:
    """Relative-only twin of ``config`` used by the two-step baseline."""
    return replace(config, relative_only=True, use_depth_features=use_depth_features, stage2=False)


def compare_baseline(train: PoseDataset, test: PoseDataset, config: PoseNetConfig, seed: int = 0,
                     baseline_depth_features: bool = False, bin_width: float = 50.0, cap: float = 1000.0):
    """Train the direct network and the baseline's relative network, evaluate both on ``test``.

    Returns ``(reports, nets)`` with reports labelled ``Baseline`` and ``Ours``.
    """
    train_data = TrainingData.from_dataset(train)
    test_data = TrainingData.from_dataset(test)
    direct_cfg = replace(config, relative_only=False)
    direct, _ = train_stage1(replace(direct_cfg, stage2=False), train_data, seed)
    if direct_cfg.stage2:
        direct, _ = train_stage2(direct_cfg, train_data, direct, seed)
    rel_net, _ = train_stage1(baseline_config(config, baseline_depth_features), train_data, seed)
    reports = evaluate_pair(direct, rel_net, test, test_data, bin_width, cap)
    return reports, {"direct": direct, "baseline": rel_net}


def evaluate_pair(direct, rel_net, test: PoseDataset, test_data: TrainingData, bin_width=50.0, cap=1000.0
                  ) -> list[EvalReport]:
    root = test.joints.root_index
    sids = test.scene_id[test_data.index]
    base = baseline_predict_batch(rel_net, test_data)
    ours = predict_direct(direct, test_data)
    return [
        make_report(base.xyz, test_data.xyz, len(test), sids, root, bin_width, cap, label="Baseline"),
        make_report(ours, test_data.xyz, len(test), sids, root, bin_width, cap, label="Ours"),
    ]


# -- corruption suite ---------------------------------------------------------

CORRUPTIONS = ("mirror_limb", "shrink", "grow", "limb_noise", "lean")

_LIMBS = (("r_shoulder", "r_elbow", "r_wrist"), ("l_shoulder", "l_elbow", "l_wrist"),
          ("r_hip", "r_knee", "r_ankle"), ("l_hip", "l_knee", "l_ankle"))


def corrupt_relative(rel: np.ndarray, kind: str, rng: np.random.Generator, joints: JointSet) -> np.ndarray:
    """Systematically distort root-relative poses ``(N, J, 3)`` (root at the origin)."""
    out = np.array(rel, dtype=float, copy=True)
    n = len(out)
    if kind == "mirror_limb":
        for i in range(n):
            limb = [joints.index(j) for j in _LIMBS[rng.integers(len(_LIMBS))]]
            # reflect the limb about its base joint within the image plane
            base = out[i, limb[0]]
            out[i, limb[1:]] = base + (out[i, limb[1:]] - base) * np.array([-1.0, -1.0, 1.0])
    elif kind == "shrink":
        out *= 0.75
    elif kind == "grow":
        out *= 1.3
    elif kind == "limb_noise":
        nr = joints.non_root
        out[:, nr] += rng.normal(0.0, 120.0, out[:, nr].shape)
    elif kind == "lean":
        # rotate the whole body 35 degrees about the camera's viewing axis
        c, s = np.cos(np.radians(35)), np.sin(np.radians(35))
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        out = out @ rot.T
    else:
        raise ValueError(f"unknown corruption {kind!r}; choose from {CORRUPTIONS}")
    out[:, joints.root_index] = 0.0
    return out


def run_corruption_suite(direct, rel_net, test_data: TrainingData, kinds=CORRUPTIONS, seed: int = 0,
                         threshold: float = 500.0) -> tuple[list[dict], dict]:
    """Apply identical distortions to each method's relative pose and compare placement.

    The direct method keeps its own predicted hip; the baseline re-fits the
    translation to the detections. Returns per-kind rows and the pooled summary.
    """
    joints = test_data.joints
    r = joints.root_index
    gt = test_data.xyz
    direct_abs = predict_direct(direct, test_data)
    direct_hip = direct_abs[:, r]
    direct_rel = direct_abs - direct_hip[:, None]
    base_rel = rel_net.predict(test_data.features(rel_net.config.use_depth_features))
    rows, pooled = [], {"direct_root": [], "baseline_root": [], "direct_err": [], "baseline_err": []}
    for kind in kinds:
        rng_d = np.random.default_rng([seed, CORRUPTIONS.index(kind) if kind in CORRUPTIONS else 0])
        rng_b = np.random.default_rng([seed, CORRUPTIONS.index(kind) if kind in CORRUPTIONS else 0])
        d_pose = corrupt_relative(direct_rel, kind, rng_d, joints) + direct_hip[:, None]
        b_rel = corrupt_relative(base_rel, kind, rng_b, joints)
        b_pose = baseline_predict_batch(rel_net, test_data, rel_override=b_rel).xyz
        d_root = np.linalg.norm(d_pose[:, r] - gt[:, r], axis=1)
        b_root = np.linalg.norm(b_pose[:, r] - gt[:, r], axis=1)
        d_err = per_pose_errors(d_pose, gt)
        b_err = per_pose_errors(b_pose, gt)
        rows.append({
            "corruption": kind,
            "direct_median_root_error": float(np.median(d_root)),
            "baseline_median_root_error": float(np.median(b_root)),
            "direct_frac_above": float(np.mean(d_err > threshold)),
            "baseline_frac_above": float(np.mean(b_err > threshold)),
        })
        pooled["direct_root"].append(d_root)
        pooled["baseline_root"].append(b_root)
        pooled["direct_err"].append(d_err)
        pooled["baseline_err"].append(b_err)
    cat = {k: np.concatenate(v) for k, v in pooled.items()}
    summary = {
        "direct_median_root_error": float(np.median(cat["direct_root"])),
        "baseline_median_root_error": float(np.median(cat["baseline_root"])),
        "direct_frac_above": float(np.mean(cat["direct_err"] > threshold)),
        "baseline_frac_above": float(np.mean(cat["baseline_err"] > threshold)),
        "threshold_mm": threshold,
    }
    return rows, summary
