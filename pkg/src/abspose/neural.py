"""Minimal double-precision neural network toolkit.

Layers keep the activations they need from the last forward call and return
input gradients from ``backward`` while accumulating parameter gradients into
``Parameter.grad``. A network instance is single-writer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    pass


class EmptyBatchError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    step: int = 0

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


class Layer:
    def parameters(self) -> list[Parameter]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray, mode: Mode = Mode.EVAL) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Dense(Layer):
    """Fully connected layer ``y = x W + b``; weights drawn from N(0, 1/fan_in)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None, name: str = "dense"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.W = Parameter(f"{name}.W", rng.standard_normal((n_in, n_out)) / np.sqrt(n_in))
        self.b = Parameter(f"{name}.b", np.zeros(n_out))
        self._x = None

    def parameters(self):
        return [self.W, self.b]

    def forward(self, x, mode=Mode.EVAL):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.W.value.shape[0]:
            raise ShapeError(f"dense layer expects (batch, {self.W.value.shape[0]}), got {x.shape}")
        self._x = x
        return x @ self.W.value + self.b.value

    def backward(self, dy):
        if dy.shape != (self._x.shape[0], self.W.value.shape[1]):
            raise ShapeError(f"upstream gradient has shape {dy.shape}")
        self.W.grad += self._x.T @ dy
        self.b.grad += dy.sum(axis=0)
        return dy @ self.W.value.T


class BatchNorm(Layer):
    def __init__(self, width: int, momentum: float = 0.1, eps: float = 1e-5, name: str = "bn"):
        self.gamma = Parameter(f"{name}.gamma", np.ones(width))
        self.beta = Parameter(f"{name}.beta", np.zeros(width))
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.momentum = momentum
        self.eps = eps
        self.name = name
        self._cache = None

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}

    def forward(self, x, mode=Mode.EVAL):
        if x.ndim != 2 or x.shape[1] != self.gamma.value.shape[0]:
            raise ShapeError(f"batch norm expects (batch, {self.gamma.value.shape[0]}), got {x.shape}")
        mode = Mode(mode)
        if mode is Mode.TRAIN:
            if x.shape[0] < 2:
                raise ShapeError("train-mode batch norm needs a batch of at least 2")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mean
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, mode)
        return xhat * self.gamma.value + self.beta.value

    def backward(self, dy):
        xhat, inv_std, mode = self._cache
        self.gamma.grad += np.sum(dy * xhat, axis=0)
        self.beta.grad += dy.sum(axis=0)
        dxhat = dy * self.gamma.value
        if mode is Mode.EVAL:
            return dxhat * inv_std
        n = dy.shape[0]
        return inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))


class ReLU(Layer):
    def forward(self, x, mode=Mode.EVAL):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy):
        return dy * self._mask


class Dropout(Layer):
    """Inverted dropout: survivors are rescaled at train time, eval is the identity."""

    def __init__(self, rate: float, rng: np.random.Generator | None = None):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._mask = None

    def forward(self, x, mode=Mode.EVAL):
        if Mode(mode) is Mode.EVAL or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (self.rng.random(x.shape) < keep) / keep
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


class Sequential(Layer):
    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self):
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def forward(self, x, mode=Mode.EVAL):
        for layer in self.layers:
            x = layer.forward(x, mode)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


class ResidualBlock(Layer):
    """Two (dense, batch norm, ReLU, dropout) stages with an additive skip connection."""

    def __init__(self, width: int, dropout: float, rng: np.random.Generator, dropout_rng: np.random.Generator | None = None,
                 momentum: float = 0.1, eps: float = 1e-5, name: str = "block"):
        dropout_rng = dropout_rng if dropout_rng is not None else rng
        self.width = width
        self.body = Sequential([
            Dense(width, width, rng, name=f"{name}.dense1"),
            BatchNorm(width, momentum, eps, name=f"{name}.bn1"),
            ReLU(),
            Dropout(dropout, dropout_rng),
            Dense(width, width, rng, name=f"{name}.dense2"),
            BatchNorm(width, momentum, eps, name=f"{name}.bn2"),
            ReLU(),
            Dropout(dropout, dropout_rng),
        ])  # fmt: skip

    def parameters(self):
        return self.body.parameters()

    def buffers(self):
        return self.body.buffers()

    def forward(self, x, mode=Mode.EVAL):
        if x.ndim != 2 or x.shape[1] != self.width:
            raise ShapeError(f"residual block of width {self.width} got input {x.shape}")
        return x + self.body.forward(x, mode)

    def backward(self, dy):
        return dy + self.body.backward(dy)


# -- losses -------------------------------------------------------------------


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and target {gt.shape} differ in shape")
    if pred.size == 0:
        raise EmptyBatchError("loss over an empty batch of poses")
    pred = pred.reshape(pred.shape[0], -1) if pred.ndim > 1 else pred.reshape(1, -1)
    gt = gt.reshape(pred.shape)
    return pred, gt


def l1_loss(pred, gt) -> tuple[float, np.ndarray]:
    """Sum of absolute errors per pose, averaged over the poses in the batch.

    Returns ``(loss, dloss/dpred)``; the subgradient at a tie is 0.
    """
    shape = np.shape(pred)
    pred, gt = _check_pair(pred, gt)
    diff = pred - gt
    n = pred.shape[0]
    return float(np.abs(diff).sum() / n), (np.sign(diff) / n).reshape(shape)


def l2_loss(pred, gt) -> tuple[float, np.ndarray]:
    shape = np.shape(pred)
    pred, gt = _check_pair(pred, gt)
    diff = pred - gt
    n = pred.shape[0]
    return float(np.sum(diff * diff) / n), (2.0 * diff / n).reshape(shape)


LOSSES = {"l1": l1_loss, "l2": l2_loss}


# -- optimization -------------------------------------------------------------


def adam_step(params: list[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
    for p in params:
        p.step += 1
        p.m *= beta1
        p.m += (1.0 - beta1) * p.grad
        p.v *= beta2
        p.v += (1.0 - beta2) * p.grad * p.grad
        m_hat = p.m / (1.0 - beta1**p.step)
        v_hat = p.v / (1.0 - beta2**p.step)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + epsilon)


def lr_schedule(epoch: int, base_lr: float = 0.001, decay: float = 0.96, period: int = 4) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return base_lr * decay ** (epoch // period)


# -- gradient checking --------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_parameter: str
    worst_index: tuple
    per_parameter: dict[str, float]
    input_rel_error: float | None = None

    def passed(self, tolerance: float) -> bool:
        errs = [self.max_rel_error] + ([self.input_rel_error] if self.input_rel_error is not None else [])
        return max(errs) < tolerance


def _rel_error(a: np.ndarray, n: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradient_check(network: Layer, x: np.ndarray, h: float = 1e-5, seed: int = 0, check_input: bool = True,
                   floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients with central finite differences in eval mode.

    The scalar probed is ``sum(network(x) * R)`` for a fixed random ``R``.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = network.forward(x, Mode.EVAL)
    proj = np.random.default_rng(seed).standard_normal(y.shape)

    def objective(inp):
        return float(np.sum(network.forward(inp, Mode.EVAL) * proj))

    params = network.parameters()
    for p in params:
        p.zero_grad()
    network.forward(x, Mode.EVAL)
    dx = network.backward(proj)
    analytic = {p.name: p.grad.copy() for p in params}

    per_param = {}
    worst = (-1.0, "", ())
    for p in params:
        numeric = np.zeros_like(p.value)
        for idx in np.ndindex(p.value.shape):
            orig = p.value[idx]
            p.value[idx] = orig + h
            fp = objective(x)
            p.value[idx] = orig - h
            fm = objective(x)
            p.value[idx] = orig
            numeric[idx] = (fp - fm) / (2 * h)
        err = _rel_error(analytic[p.name], numeric, floor)
        k = np.unravel_index(np.argmax(err), err.shape) if err.size else ()
        per_param[p.name] = float(err[k]) if err.size else 0.0
        if per_param[p.name] > worst[0]:
            worst = (per_param[p.name], p.name, tuple(int(i) for i in k))

    input_err = None
    if check_input:
        numeric = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp = x.copy()
            xp[idx] += h
            xm = x.copy()
            xm[idx] -= h
            numeric[idx] = (objective(xp) - objective(xm)) / (2 * h)
        input_err = float(np.max(_rel_error(dx, numeric, floor)))
    return GradCheckReport(worst[0], worst[1], worst[2], per_param, input_err)


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = b"ABSPOSE\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None):
    """Write tensors in a flat little-endian binary layout.

    Layout: magic (8 bytes), version (u32), metadata JSON length (u32) and
    UTF-8 bytes, tensor count (u32), then per tensor: name length (u16), name,
    ndim (u8), shape (u32 each), row-major float64 data.
    """
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, meta_len = struct.unpack_from("<II", data, 8)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 16
        meta = json.loads(data[off:off + meta_len].decode("utf-8"))
        off += meta_len
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 8 * size > len(data):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return tensors, meta
