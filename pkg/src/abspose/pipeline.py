"""PoseNet assembly: input features, absolute-pose decoding, training stages and the two-step baseline.

Feature layout for ``J`` joints (root removed from the relative block)::

    [rel_2d (J-1)*2 | hip_2d 2 | log_depth J]      use_depth_features=True  (3J)
    [rel_2d (J-1)*2 | hip_2d 2]                    use_depth_features=False (2J)

Prediction layout::

    [rel_3d (J-1)*3 mm | hip_x mm | hip_y mm | hip_z]   hip_z is ln(z / unit) when log_hip_z
    [rel_3d (J-1)*3 mm]                                 relative_only (baseline network)

Joints appear in joint-set order within each block.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import neural
from .geometry import DegenerateConfigurationError, solve_weak_perspective_translation
from .neural import Dense, Layer, Mode, Parameter, ResidualBlock, Sequential
from .skeleton import DEFAULT_JOINTS, JointSet, Pose3D, RootMissing, get_joint_set
from .synthdata import PoseDataset

log = logging.getLogger(__name__)

# depth used when the baseline cannot recover a finite, positive translation
UNBOUNDED_DEPTH_MM = 1e5


class ConfigConflict(ValueError):
    pass


@dataclass
class PoseNetConfig:
    num_blocks: int = 2
    hidden_width: int = 256
    dropout: float = 0.5
    use_depth_features: bool = True
    log_hip_z: bool = True
    loss: str = "l1"
    epochs: int = 100
    batch_size: int = 256
    base_lr: float = 1e-3
    lr_decay: float = 0.96
    lr_period: int = 4
    augmentation: bool = False
    aug_prob: float = 0.5
    aug_zoom_min: float = 0.5
    aug_zoom_max: float = 1.5
    aug_sigma_px: float = 5.0
    relative_only: bool = False
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    depth_unit_mm: float = 1.0
    stage2: bool = False
    stage2_epochs: int = 5
    stage2_batch_size: int = 30
    stage2_lr: float = 1e-5
    joint_set: str = "default14"

    def __post_init__(self):
        if self.hidden_width <= 0 or self.num_blocks < 0:
            raise ConfigConflict("hidden_width must be positive and num_blocks non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigConflict("dropout must be in [0, 1)")
        if self.loss not in neural.LOSSES:
            raise ConfigConflict(f"loss must be one of {sorted(neural.LOSSES)}")
        if self.stage2 and not self.use_depth_features:
            raise ConfigConflict("stage 2 recalibrates depth readouts and needs use_depth_features")
        if self.batch_size < 2 or self.stage2_batch_size < 2:
            raise ConfigConflict("batch sizes must be at least 2 for batch normalization")
        if self.depth_unit_mm <= 0:
            raise ConfigConflict("depth_unit_mm must be positive")

    @property
    def joints(self) -> JointSet:
        return get_joint_set(self.joint_set)

    def feature_width(self, n_joints: int | None = None) -> int:
        j = n_joints or len(self.joints)
        return 3 * j if self.use_depth_features else 2 * j

    def output_width(self, n_joints: int | None = None) -> int:
        j = n_joints or len(self.joints)
        return 3 * (j - 1) if self.relative_only else 3 * j

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> PoseNetConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- features and targets -----------------------------------------------------


def build_features(xy_norm, visible, logdepth, joints: JointSet = DEFAULT_JOINTS, use_depth: bool = True) -> np.ndarray:
    """Features for one pose ``(J, 2)`` or a batch ``(P, J, 2)`` of normalized detections.

    Missed non-root joints get a zero relative offset and the hip's depth readout.
    """
    xy = np.asarray(xy_norm, dtype=float)
    single = xy.ndim == 2
    if single:
        xy, visible, logdepth = xy[None], np.asarray(visible)[None], np.asarray(logdepth)[None]
    visible = np.asarray(visible, dtype=bool)
    r = joints.root_index
    if xy.shape[1] != len(joints):
        raise ValueError(f"expected {len(joints)} joints, got {xy.shape[1]}")
    if not np.all(visible[:, r]):
        raise RootMissing("root joint not detected")
    hip = xy[:, r]
    nr = joints.non_root
    rel = xy[:, nr] - hip[:, None]
    rel[~visible[:, nr]] = 0.0
    parts = [rel.reshape(len(xy), -1), hip]
    if use_depth:
        logdepth = np.asarray(logdepth, dtype=float)
        if logdepth.shape != visible.shape:
            raise ValueError("depth readout must have one entry per joint")
        d = np.where(visible, logdepth, logdepth[:, r:r + 1])
        parts.append(d)
    out = np.concatenate(parts, axis=1)
    return out[0] if single else out


def encode_target(xyz, joints: JointSet = DEFAULT_JOINTS, log_hip_z: bool = True, relative_only: bool = False,
                  depth_unit_mm: float = 1.0) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=float)
    single = xyz.ndim == 2
    if single:
        xyz = xyz[None]
    hip = xyz[:, joints.root_index]
    rel = (xyz[:, joints.non_root] - hip[:, None]).reshape(len(xyz), -1)
    if relative_only:
        out = rel
    else:
        if log_hip_z:
            if np.any(~(hip[:, 2] > 0)):
                raise ValueError("root depth must be positive to encode log z")
            hz = np.log(hip[:, 2] / depth_unit_mm)
        else:
            hz = hip[:, 2]
        out = np.concatenate([rel, hip[:, :2], hz[:, None]], axis=1)
    return out[0] if single else out


def decode_prediction(pred, joints: JointSet = DEFAULT_JOINTS, log_hip_z: bool = True, relative_only: bool = False,
                      depth_unit_mm: float = 1.0, hip=None) -> np.ndarray:
    """Turn encoded predictions back into ``(.., J, 3)`` camera-space joints.

    ``relative_only`` predictions are placed with their root at ``hip``
    (the origin when not given).
    """
    pred = np.asarray(pred, dtype=float)
    single = pred.ndim == 1
    if single:
        pred = pred[None]
    n, j = len(pred), len(joints)
    rel = pred[:, : 3 * (j - 1)].reshape(n, j - 1, 3)
    if relative_only:
        root = np.zeros((n, 3)) if hip is None else np.broadcast_to(np.asarray(hip, dtype=float), (n, 3))
    else:
        hz = pred[:, 3 * (j - 1) + 2]
        z = depth_unit_mm * np.exp(hz) if log_hip_z else hz
        root = np.stack([pred[:, 3 * (j - 1)], pred[:, 3 * (j - 1) + 1], z], axis=1)
    out = np.empty((n, j, 3))
    out[:, joints.root_index] = root
    out[:, joints.non_root] = rel + root[:, None]
    return out[0] if single else out


# -- network ------------------------------------------------------------------


class DepthRecalibration(Layer):
    """Per-joint affine ``scale * d + offset`` on log-depth readouts, initialized to identity.

    Stands in for fine-tuning the top layer of a depth estimator.
    """

    def __init__(self, n_joints: int):
        self.scale = Parameter("recalib.scale", np.ones(n_joints))
        self.offset = Parameter("recalib.offset", np.zeros(n_joints))

    def parameters(self):
        return [self.scale, self.offset]

    def forward(self, d, mode=Mode.EVAL):
        self._d = d
        return d * self.scale.value + self.offset.value

    def backward(self, dy):
        self.scale.grad += np.sum(dy * self._d, axis=0)
        self.offset.grad += dy.sum(axis=0)
        return dy * self.scale.value


class PoseNet(Layer):
    """Input standardization, dense projection, residual blocks and dense output.

    ``forward`` maps raw features to standardized predictions;
    :meth:`predict` returns camera-space joints.
    """

    def __init__(self, config: PoseNetConfig, seed: int = 0):
        self.config = config
        self.joints = config.joints
        n_j = len(self.joints)
        self.in_dim = config.feature_width(n_j)
        self.out_dim = config.output_width(n_j)
        init_ss, drop_ss = np.random.SeedSequence(seed).spawn(2)
        init_rng = np.random.default_rng(init_ss)
        self.dropout_rng = np.random.default_rng(drop_ss)
        w = config.hidden_width
        self.core = Sequential(
            [Dense(self.in_dim, w, init_rng, name="input")]
            + [ResidualBlock(w, config.dropout, init_rng, self.dropout_rng, config.bn_momentum, config.bn_eps,
                             name=f"block{i}") for i in range(config.num_blocks)]
            + [Dense(w, self.out_dim, init_rng, name="output")]
        )
        self.in_mean = np.zeros(self.in_dim)
        self.in_std = np.ones(self.in_dim)
        self.out_mean = np.zeros(self.out_dim)
        self.out_std = np.ones(self.out_dim)
        self.recalib = DepthRecalibration(n_j) if config.use_depth_features else None
        self.train_recalibration = False

    @property
    def depth_slice(self) -> slice:
        n_j = len(self.joints)
        return slice(2 * n_j, 3 * n_j)

    def parameters(self):
        ps = self.core.parameters()
        if self.train_recalibration and self.recalib is not None:
            ps = self.recalib.parameters() + ps
        return ps

    def fit_normalization(self, features: np.ndarray, targets: np.ndarray):
        self.in_mean, self.in_std = _moments(features)
        self.out_mean, self.out_std = _moments(targets)

    def forward(self, x, mode=Mode.EVAL):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise neural.ShapeError(f"PoseNet expects (batch, {self.in_dim}) features, got {x.shape}")
        if self.recalib is not None:
            x = x.copy()
            x[:, self.depth_slice] = self.recalib.forward(x[:, self.depth_slice], mode)
        return self.core.forward((x - self.in_mean) / self.in_std, mode)

    def backward(self, dy):
        dx = self.core.backward(dy) / self.in_std
        if self.recalib is not None:
            dd = dx[:, self.depth_slice]
            if self.train_recalibration:
                dx[:, self.depth_slice] = self.recalib.backward(dd)
            else:
                dx[:, self.depth_slice] = dd * self.recalib.scale.value
        return dx

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def predict_encoded(self, x) -> np.ndarray:
        return self.forward(x, Mode.EVAL) * self.out_std + self.out_mean

    def predict(self, x, hip=None) -> np.ndarray:
        c = self.config
        return decode_prediction(self.predict_encoded(x), self.joints, c.log_hip_z, c.relative_only,
                                 c.depth_unit_mm, hip=hip)

    # -- persistence --

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {p.name: p.value for p in self.core.parameters()}
        out.update(self.core.buffers())
        if self.recalib is not None:
            out.update({p.name: p.value for p in self.recalib.parameters()})
        out.update({"norm.in_mean": self.in_mean, "norm.in_std": self.in_std,
                    "norm.out_mean": self.out_mean, "norm.out_std": self.out_std})
        return out

    def load_state_dict(self, tensors: dict[str, np.ndarray]):
        params = {p.name: p for p in self.core.parameters()}
        if self.recalib is not None:
            params.update({p.name: p for p in self.recalib.parameters()})
        buffers = self.core.buffers()
        for name, arr in tensors.items():
            if name in params:
                target = params[name].value
            elif name in buffers:
                target = buffers[name]
            elif name.startswith("norm."):
                setattr(self, name[5:], np.array(arr, dtype=np.float64))
                continue
            else:
                raise neural.CheckpointError(f"unexpected tensor {name!r} in checkpoint")
            if target.shape != arr.shape:
                raise neural.CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {target.shape}")
            target[...] = arr

    def save(self, path):
        neural.save_checkpoint(path, self.state_dict(), {"posenet": self.config.to_dict()})

    @classmethod
    def load(cls, path) -> PoseNet:
        tensors, meta = neural.load_checkpoint(path)
        if "posenet" not in meta:
            raise neural.CheckpointError(f"{path}: checkpoint lacks a PoseNet configuration")
        net = cls(PoseNetConfig.from_dict(meta["posenet"]))
        net.load_state_dict(tensors)
        return net


def _moments(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = a.mean(axis=0)
    std = a.std(axis=0)
    return mean, np.where(std > 1e-8, std, 1.0)


# -- training data ------------------------------------------------------------


@dataclass
class TrainingData:
    """Detected poses of a dataset, ready for feature construction."""

    joints: JointSet
    xy_norm: np.ndarray  # (N, J, 2)
    visible: np.ndarray
    logdepth: np.ndarray
    xyz: np.ndarray  # ground truth, (N, J, 3)
    fx: np.ndarray  # (N,)
    fy: np.ndarray
    index: np.ndarray = field(default=None)  # rows of the source dataset

    def __len__(self):
        return len(self.xyz)

    @classmethod
    def from_dataset(cls, ds: PoseDataset, targets: np.ndarray | None = None) -> TrainingData:
        keep = np.nonzero(ds.detected)[0]
        cams = [ds.camera_of(i) for i in keep]
        xyz = ds.xyz if targets is None else targets
        return cls(ds.joints, ds.normalized_uv()[keep], ds.visible[keep], ds.logdepth[keep], xyz[keep],
                   np.array([c.fx for c in cams]), np.array([c.fy for c in cams]), keep)

    def features(self, use_depth: bool, xy_norm: np.ndarray | None = None) -> np.ndarray:
        xy = self.xy_norm if xy_norm is None else xy_norm
        return build_features(xy, self.visible, self.logdepth, self.joints, use_depth)

    def targets(self, config: PoseNetConfig) -> np.ndarray:
        return encode_target(self.xyz, self.joints, config.log_hip_z, config.relative_only, config.depth_unit_mm)

    def subset(self, idx) -> TrainingData:
        return TrainingData(self.joints, self.xy_norm[idx], self.visible[idx], self.logdepth[idx], self.xyz[idx],
                            self.fx[idx], self.fy[idx], None if self.index is None else self.index[idx])


def augment_detections(data: TrainingData, config: PoseNetConfig, rng: np.random.Generator) -> np.ndarray:
    """Normalized detections after random crop/zoom of a fraction of the images.

    The detector is re-run on the zoomed image, so pixel noise of
    ``aug_sigma_px`` maps to ``aug_sigma_px / (f * zoom)`` in normalized units.
    The crop offset shifts pixels and principal point together and cancels.
    """
    xy = data.xy_norm.copy()
    n = len(data)
    chosen = rng.random(n) < config.aug_prob
    zoom = rng.uniform(config.aug_zoom_min, config.aug_zoom_max, n)
    noise = rng.standard_normal(xy.shape)
    exact = data.xyz[..., :2] / data.xyz[..., 2:3]
    scale = np.stack([config.aug_sigma_px / (data.fx * zoom), config.aug_sigma_px / (data.fy * zoom)], axis=1)
    fresh = exact + noise * scale[:, None, :]
    xy[chosen] = fresh[chosen]
    xy[~data.visible] = np.nan
    return xy


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled mini-batches covering all ``n`` items; a trailing singleton joins the previous batch."""
    perm = rng.permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)
    steps: int = 0

    @property
    def losses(self) -> list[float]:
        return [r["mean_train_loss"] for r in self.rows]

    def to_csv(self, path):
        cols = ("stage", "epoch", "lr", "mean_train_loss", "val_a_mpjpe", "val_r_mpjpe")
        lines = [",".join(cols)]
        for r in self.rows:
            lines.append(",".join(_csv_value(r.get(c)) for c in cols))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _csv_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}" if abs(v) >= 1e-3 or v == 0 else f"{v:.6e}"
    return str(v)


def _run_epoch(net: PoseNet, feats: np.ndarray, targets_std: np.ndarray, batch_size: int, lr: float,
               loss_fn, rng: np.random.Generator) -> tuple[float, int]:
    total, steps = 0.0, 0
    params = net.parameters()
    for idx in iterate_batches(len(feats), batch_size, rng):
        net.zero_grad()
        out = net.forward(feats[idx], Mode.TRAIN)
        loss, grad = loss_fn(out, targets_std[idx])
        net.backward(grad)
        neural.adam_step(params, lr)
        total += loss
        steps += 1
    return total / steps, steps


def _validate(net: PoseNet, val: TrainingData | None) -> tuple[float | None, float | None]:
    if val is None or len(val) == 0 or net.config.relative_only:
        return None, None
    from .evaluation import a_mpjpe, r_mpjpe

    pred = net.predict(val.features(net.config.use_depth_features))
    return a_mpjpe(pred, val.xyz), r_mpjpe(pred, val.xyz, root_index=val.joints.root_index)


def train_stage1(config: PoseNetConfig, data: TrainingData, seed: int = 0, val: TrainingData | None = None,
                 history: TrainHistory | None = None) -> tuple[PoseNet, TrainHistory]:
    """Train PoseNet with fixed depth readouts (Adam, step-decayed learning rate)."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    history = history or TrainHistory()
    net = PoseNet(config, seed)
    shuffle_ss, aug_ss = np.random.SeedSequence([seed, 1]).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    aug_rng = np.random.default_rng(aug_ss)

    targets = data.targets(config)
    base_feats = data.features(config.use_depth_features)
    net.fit_normalization(base_feats, targets)
    targets_std = (targets - net.out_mean) / net.out_std
    loss_fn = neural.LOSSES[config.loss]

    for epoch in range(config.epochs):
        lr = neural.lr_schedule(epoch, config.base_lr, config.lr_decay, config.lr_period)
        feats = base_feats
        if config.augmentation:
            feats = data.features(config.use_depth_features, augment_detections(data, config, aug_rng))
        mean_loss, steps = _run_epoch(net, feats, targets_std, config.batch_size, lr, loss_fn, shuffle_rng)
        history.steps += steps
        if not np.isfinite(mean_loss):
            raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
        va, vr = _validate(net, val)
        history.rows.append({"stage": 1, "epoch": epoch, "lr": lr, "mean_train_loss": mean_loss,
                             "val_a_mpjpe": va, "val_r_mpjpe": vr})
        log.debug("stage1 epoch %d lr %.3g loss %.4f val %s", epoch, lr, mean_loss, va)
    return net, history


def train_stage2(config: PoseNetConfig, data: TrainingData, net: PoseNet, seed: int = 0,
                 val: TrainingData | None = None, history: TrainHistory | None = None) -> tuple[PoseNet, TrainHistory]:
    """Jointly fine-tune the depth recalibration and PoseNet at a small constant learning rate."""
    if not net.config.use_depth_features or net.recalib is None:
        raise ConfigConflict("stage 2 needs a network that consumes depth features")
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    history = history or TrainHistory()
    net.train_recalibration = True
    for p in net.parameters():
        p.m[...] = 0.0
        p.v[...] = 0.0
        p.step = 0
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    targets_std = (data.targets(net.config) - net.out_mean) / net.out_std
    feats = data.features(True)
    loss_fn = neural.LOSSES[net.config.loss]
    for epoch in range(config.stage2_epochs):
        mean_loss, steps = _run_epoch(net, feats, targets_std, config.stage2_batch_size, config.stage2_lr,
                                      loss_fn, rng)
        history.steps += steps
        va, vr = _validate(net, val)
        history.rows.append({"stage": 2, "epoch": epoch, "lr": config.stage2_lr, "mean_train_loss": mean_loss,
                             "val_a_mpjpe": va, "val_r_mpjpe": vr})
    # a fresh config object, so callers sharing the stage-1 config are unaffected
    net.config = replace(net.config, stage2=True)
    return net, history


# -- inference ----------------------------------------------------------------


def predict_direct(net: PoseNet, data: TrainingData) -> np.ndarray:
    return net.predict(data.features(net.config.use_depth_features))


@dataclass
class BaselineResult:
    xyz: np.ndarray  # (N, J, 3)
    unbounded: np.ndarray  # (N,) bool


def place_relative(rel_xyz: np.ndarray, xy_norm: np.ndarray, visible: np.ndarray,
                   joints: JointSet = DEFAULT_JOINTS) -> Pose3D:
    """Absolute pose from a root-relative pose and its detections via weak-perspective translation.

    Only detected joints enter the fit. A degenerate or behind-camera solution
    is flagged and the pose is pushed out along the hip ray to
    ``UNBOUNDED_DEPTH_MM``.
    """
    vis = np.asarray(visible, dtype=bool)
    try:
        sol = solve_weak_perspective_translation(xy_norm[vis], rel_xyz[vis], f=1.0)
        t = sol.t_array
        ok = t[2] > 0
    except DegenerateConfigurationError:
        ok = False
    if not ok:
        hip = xy_norm[joints.root_index]
        t = np.array([hip[0] * UNBOUNDED_DEPTH_MM, hip[1] * UNBOUNDED_DEPTH_MM, UNBOUNDED_DEPTH_MM])
    return Pose3D(rel_xyz + t, detected=True, unbounded_translation=not ok)


def baseline_predict(xy_norm, visible, rel_xyz, joints: JointSet = DEFAULT_JOINTS) -> Pose3D:
    """Two-step baseline for one pose: root-relative 3D from the network, then translation fit."""
    if not np.asarray(visible)[joints.root_index]:
        raise RootMissing("root joint not detected")
    return place_relative(np.asarray(rel_xyz, dtype=float), np.asarray(xy_norm, dtype=float), visible, joints)


def baseline_predict_batch(net_rel: PoseNet, data: TrainingData, rel_override: np.ndarray | None = None
                           ) -> BaselineResult:
    if not net_rel.config.relative_only:
        raise ConfigConflict("the baseline expects a relative-only network")
    rel = net_rel.predict(data.features(net_rel.config.use_depth_features)) if rel_override is None else rel_override
    out = np.empty_like(rel)
    unbounded = np.zeros(len(rel), dtype=bool)
    for i in range(len(rel)):
        pose = place_relative(rel[i], data.xy_norm[i], data.visible[i], data.joints)
        out[i] = pose.xyz
        unbounded[i] = pose.unbounded_translation
    return BaselineResult(out, unbounded)
