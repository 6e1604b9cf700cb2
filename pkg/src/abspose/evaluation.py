"""Absolute / relative MPJPE, detection rate, error histograms and report emission."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .skeleton import Pose3D


class EvaluationError(ValueError):
    pass


def _stack(poses) -> np.ndarray:
    if isinstance(poses, np.ndarray):
        return np.asarray(poses, dtype=float)
    return np.stack([p.xyz if isinstance(p, Pose3D) else np.asarray(p, dtype=float) for p in poses])


def _matched(pred, gt, matching):
    pred, gt = _stack(pred), _stack(gt)
    if matching is not None:
        matching = np.asarray(matching, dtype=int).reshape(-1, 2)
        pred, gt = pred[matching[:, 0]], gt[matching[:, 1]]
    if len(pred) == 0:
        raise EvaluationError("no matched poses to evaluate")
    if pred.shape != gt.shape:
        raise EvaluationError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return pred, gt


def per_pose_errors(pred, gt, matching=None) -> np.ndarray:
    """Mean per-joint Euclidean distance for every matched pose (absolute coordinates)."""
    pred, gt = _matched(pred, gt, matching)
    return np.linalg.norm(pred - gt, axis=-1).mean(axis=-1)


def a_mpjpe(pred, gt, matching=None) -> float:
    """Absolute MPJPE in mm.

    ``matching`` is an optional sequence of ``(pred_index, gt_index)`` pairs;
    by default pose ``i`` is compared with ground truth ``i``.
    """
    pred, gt = _matched(pred, gt, matching)
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def r_mpjpe(pred, gt, matching=None, root_index: int = 0) -> float:
    """MPJPE after moving the root of both poses to the origin."""
    pred, gt = _matched(pred, gt, matching)
    pred = pred - pred[:, root_index:root_index + 1]
    gt = gt - gt[:, root_index:root_index + 1]
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def detection_rate(predicted, n_ground_truth: int) -> float:
    """Fraction of ground-truth poses that received a prediction.

    ``predicted`` is either a count, a boolean mask over ground truth, or a
    list of :class:`Pose3D` whose ``detected`` flag is honored.
    """
    if n_ground_truth < 1:
        raise EvaluationError("detection rate needs at least one ground-truth pose")
    if isinstance(predicted, (int, np.integer)):
        n = int(predicted)
    elif len(predicted) and isinstance(predicted[0], Pose3D):
        n = sum(1 for p in predicted if p.detected)
    else:
        n = int(np.count_nonzero(predicted))
    if n > n_ground_truth:
        raise EvaluationError("more detections than ground-truth poses")
    return n / n_ground_truth


@dataclass
class Histogram:
    """Fixed-width bins from 0 up to ``cap`` plus one overflow bin ``[cap, inf)``."""

    bin_width: float
    cap: float
    counts: np.ndarray

    @property
    def edges(self) -> list[tuple[float, float]]:
        n = len(self.counts) - 1
        return [(i * self.bin_width, min((i + 1) * self.bin_width, self.cap)) for i in range(n)] + [(self.cap, np.inf)]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def mass_above(self, threshold: float) -> int:
        """Count in bins whose lower edge is at or above ``threshold``."""
        return int(sum(c for (lo, _), c in zip(self.edges, self.counts) if lo >= threshold))

    def to_rows(self) -> list[tuple[float, float, int]]:
        return [(lo, hi, int(c)) for (lo, hi), c in zip(self.edges, self.counts)]

    def to_csv(self, path):
        lines = ["bin_low,bin_high,count"]
        for lo, hi, c in self.to_rows():
            lines.append(f"{lo:.6f},{'inf' if np.isinf(hi) else f'{hi:.6f}'},{c}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def to_dict(self) -> dict:
        return {"bin_width": self.bin_width, "cap": self.cap,
                "bins": [{"low": lo, "high": None if np.isinf(hi) else hi, "count": c} for lo, hi, c in self.to_rows()]}


def error_histogram(values, bin_width: float = 50.0, cap: float = 1000.0) -> Histogram:
    if bin_width <= 0:
        raise EvaluationError("bin width must be positive")
    if cap <= 0:
        raise EvaluationError("histogram cap must be positive")
    values = np.asarray(values, dtype=float).reshape(-1)
    n_bins = int(np.ceil(cap / bin_width))
    counts = np.zeros(n_bins + 1, dtype=np.int64)
    inside = values < cap
    idx = np.minimum(np.floor(values[inside] / bin_width).astype(int), n_bins - 1)
    np.add.at(counts, idx, 1)
    counts[-1] = np.count_nonzero(~inside)
    return Histogram(bin_width, cap, counts)


@dataclass
class EvalReport:
    a_mpjpe: float
    r_mpjpe: float
    detection_rate: float
    n_poses: int
    n_ground_truth: int
    histogram: Histogram
    per_scene: dict[int, dict] = field(default_factory=dict)
    label: str = ""

    def summary(self) -> dict:
        return {"label": self.label, "a_mpjpe": self.a_mpjpe, "r_mpjpe": self.r_mpjpe,
                "detection_rate": self.detection_rate, "n_poses": self.n_poses, "n_ground_truth": self.n_ground_truth}

    def to_dict(self) -> dict:
        d = self.summary()
        d["histogram"] = self.histogram.to_dict()
        d["per_scene"] = {str(k): v for k, v in sorted(self.per_scene.items())}
        return d

    def write(self, out_dir, stem: str = "eval"):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(json.dumps(_round(self.to_dict()), indent=2, sort_keys=True) + "\n",
                                               encoding="utf-8")
        write_report_csv([self], out_dir / f"{stem}.csv")
        self.histogram.to_csv(out_dir / f"{stem}_histogram.csv")


REPORT_COLUMNS = ("method", "A-MPJPE", "R-MPJPE", "Detection Rate")


def write_report_csv(reports: list[EvalReport], path):
    lines = [",".join(REPORT_COLUMNS)]
    for r in reports:
        lines.append(f"{r.label},{r.a_mpjpe:.6f},{r.r_mpjpe:.6f},{r.detection_rate:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _round(obj):
    if isinstance(obj, float):
        return float(f"{obj:.6f}")
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_round(v) for v in obj]
    return obj


def make_report(pred_xyz: np.ndarray, gt_xyz: np.ndarray, n_ground_truth: int, scene_ids=None, root_index: int = 0,
                bin_width: float = 50.0, cap: float = 1000.0, label: str = "") -> EvalReport:
    """Report over matched poses; ``pred_xyz[i]`` is the prediction for ``gt_xyz[i]``.

    ``n_ground_truth`` counts every generated pose, detected or not.
    """
    errors = per_pose_errors(pred_xyz, gt_xyz)
    per_scene = {}
    if scene_ids is not None:
        scene_ids = np.asarray(scene_ids)
        for sid in np.unique(scene_ids):
            m = scene_ids == sid
            per_scene[int(sid)] = {"a_mpjpe": float(errors[m].mean()), "n_poses": int(m.sum())}
    return EvalReport(
        a_mpjpe=a_mpjpe(pred_xyz, gt_xyz),
        r_mpjpe=r_mpjpe(pred_xyz, gt_xyz, root_index=root_index),
        detection_rate=detection_rate(len(pred_xyz), n_ground_truth),
        n_poses=len(pred_xyz),
        n_ground_truth=n_ground_truth,
        histogram=error_histogram(errors, bin_width, cap),
        per_scene=per_scene,
        label=label,
    )


@dataclass
class AblationRow:
    label: str
    a_mpjpe: float
    loss: str
    depth_features: bool
    log_hip_z: bool
    augmentation: bool
    stage2: bool
    seed_values: list[float] = field(default_factory=list)
    error: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


ABLATION_COLUMNS = ("label", "a_mpjpe", "loss", "depth_features", "log_hip_z", "augmentation", "stage2", "seed_values",
                    "error")


def write_ablation_csv(rows: list[AblationRow], path):
    labels = [r.label for r in rows]
    if len(set(labels)) != len(labels):
        raise EvaluationError("ablation labels must be unique")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ABLATION_COLUMNS)
    for r in rows:
        seeds = ";".join(f"{v:.6f}" for v in r.seed_values)
        writer.writerow([r.label, f"{r.a_mpjpe:.6f}", r.loss, int(r.depth_features), int(r.log_hip_z),
                         int(r.augmentation), int(r.stage2), seeds, r.error])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
