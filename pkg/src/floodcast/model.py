"""Hybrid classifier: recurrent branch + convolutional branch fused by
feature concatenation into a softmax head, trained with a weighted
cross-entropy loss and early stopping.

The positive-class log-likelihood term is multiplied by a configurable
weight, the lever that trades precision against recall on imbalanced data:

    loss = mean( -(w * y * log(p1) + (1 - y) * log(1 - p1)) )

with both log arguments clamped below at 1e-12.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
import numpy as np

from . import autodiff as ad
from . import fastgrnn as fg
from . import fcn
from .autodiff import Node, Rng
from .errors import (
    ConfigurationError,
    ContractError,
    CorruptModelError,
    DimensionError,
    DivergenceError,
    ModelShapeError,
    ModelVersionError,
    NumericError,
)

VARIANTS = ("hybrid", "fastgrnn-only", "fcn-only")
LOG_FLOOR = 1e-12
EARLY_STOP_MIN_DELTA = 1e-5


# =====================================================================
# Configuration and parameters
# =====================================================================

@dataclass(frozen=True)
class ModelConfig:
    hidden_size: int = 64
    conv_channels: tuple[int, int, int] = (128, 256, 128)
    kernel_sizes: tuple[int, int, int] = (9, 5, 3)
    dropout_rate: float = 0.5
    num_classes: int = 2
    variant: str = "hybrid"
    loss_weight: float = 1.0
    sparsity: fg.SparsityBudget = field(default_factory=fg.SparsityBudget)
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    patience: int = 20
    max_epochs: int = 600
    batch_size: int = 64
    seed: int = 0
    normalize_features: bool = True
    input_channels: int = 9
    time_steps: int = 96
    trained_epochs: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        for name in ("hidden_size", "num_classes", "max_epochs", "batch_size",
                     "input_channels", "time_steps"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.patience < 1:
            raise ConfigurationError(f"patience must be at least 1, got {self.patience}")
        if any(c < 1 for c in self.conv_channels) or any(k < 1 for k in self.kernel_sizes):
            raise ConfigurationError("conv channels and kernel sizes must be positive")
        if len(self.conv_channels) != len(self.kernel_sizes):
            raise ConfigurationError("conv_channels and kernel_sizes lengths differ")
        if self.loss_weight <= 0.0:
            raise ConfigurationError(f"loss_weight must be positive, got {self.loss_weight}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigurationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.learning_rate <= 0.0:
            raise ConfigurationError("learning_rate must be positive")

    @property
    def uses_fastgrnn(self) -> bool:
        return self.variant in ("hybrid", "fastgrnn-only")

    @property
    def uses_fcn(self) -> bool:
        return self.variant in ("hybrid", "fcn-only")

    @property
    def feature_dim(self) -> int:
        dim = 0
        if self.uses_fastgrnn:
            dim += self.hidden_size
        if self.uses_fcn:
            dim += self.conv_channels[-1]
        return dim

    def to_dict(self) -> dict:
        return {
            "hidden_size": self.hidden_size,
            "conv_channels": list(self.conv_channels),
            "kernel_sizes": list(self.kernel_sizes),
            "dropout_rate": self.dropout_rate,
            "num_classes": self.num_classes,
            "variant": self.variant,
            "loss_weight": self.loss_weight,
            "sparsity": {"s_w": self.sparsity.s_w, "s_u": self.sparsity.s_u},
            "learning_rate": self.learning_rate,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_epsilon": self.adam_epsilon,
            "patience": self.patience,
            "max_epochs": self.max_epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "normalize_features": self.normalize_features,
            "input_channels": self.input_channels,
            "time_steps": self.time_steps,
            "trained_epochs": self.trained_epochs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["conv_channels"] = tuple(d["conv_channels"])
        d["kernel_sizes"] = tuple(d["kernel_sizes"])
        d["sparsity"] = fg.SparsityBudget(**d["sparsity"])
        return cls(**d)


@dataclass
class ModelParams:
    """All trainable state plus the input scaler and BN running stats."""

    fastgrnn: fg.FastGrnnParams | None
    fcn_blocks: tuple[fcn.ConvBlockParams, ...]
    head_weights: Node  # (L, feature_dim)
    head_bias: Node     # (L,)
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None

    def trainable(self) -> list[Node]:
        nodes: list[Node] = []
        if self.fastgrnn is not None:
            nodes.extend(self.fastgrnn.trainable())
        for block in self.fcn_blocks:
            nodes.extend(block.trainable())
        nodes.extend([self.head_weights, self.head_bias])
        return nodes


def init_model(config: ModelConfig, rng: Rng) -> ModelParams:
    grnn = None
    if config.uses_fastgrnn:
        grnn = fg.init_fastgrnn(config.time_steps, config.hidden_size, rng.split("fastgrnn"))
    blocks: list[fcn.ConvBlockParams] = []
    if config.uses_fcn:
        c_in = config.input_channels
        for i, (c_out, k) in enumerate(zip(config.conv_channels, config.kernel_sizes)):
            blocks.append(fcn.init_conv_block(c_in, c_out, k, rng.split("conv", i)))
            c_in = c_out
    head_rng = rng.split("head")
    head_w = Node(head_rng.normal((config.num_classes, config.feature_dim),
                                  scale=1.0 / math.sqrt(config.feature_dim)))
    head_b = Node(np.zeros(config.num_classes))
    return ModelParams(grnn, tuple(blocks), head_w, head_b)


# =====================================================================
# Forward pass and loss
# =====================================================================

def forward(params: ModelParams, config: ModelConfig, batch: np.ndarray,
            mode: str, rng: Rng | None = None) -> Node:
    """Class probabilities for a (B, C, T) batch; rows sum to one."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[1:] != (config.input_channels, config.time_steps):
        raise DimensionError(
            f"forward expects (B, {config.input_channels}, {config.time_steps}), "
            f"got {batch.shape}")
    if not np.isfinite(batch).all():
        raise NumericError("forward: batch contains non-finite values")
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "train" and config.dropout_rate > 0.0 and rng is None:
        raise ContractError("training forward pass with dropout needs an Rng")

    if params.feature_mean is not None:
        batch = (batch - params.feature_mean[None, :, None]) \
            / params.feature_std[None, :, None]

    features: Node | None = None
    if config.uses_fastgrnn:
        shuffled = Node(fg.dimension_shuffle(batch))
        h = fg.run_sequence_batch(params.fastgrnn, shuffled)
        features = fcn.dropout(h, config.dropout_rate, mode,
                               rng.split("drop_grnn") if rng is not None else None)
    if config.uses_fcn:
        x = Node(batch)
        for block in params.fcn_blocks:
            x = fcn.conv_block(block, x, mode)
        x = fcn.dropout(x, config.dropout_rate, mode,
                        rng.split("drop_fcn") if rng is not None else None)
        pooled = fcn.global_avg_pool(x)
        features = pooled if features is None else ad.concat(features, pooled, axis=1)

    logits = ad.add(ad.matmul(features, ad.transpose(params.head_weights)),
                    params.head_bias)
    return ad.softmax_rows(logits)


def weighted_cross_entropy(probabilities: Node, targets: np.ndarray, weight: float) -> Node:
    """Mean of ``-(w*y*log(p1) + (1-y)*log(1-p1))`` over the batch."""
    targets = np.asarray(targets, dtype=np.float64)
    if probabilities.data.ndim != 2 or probabilities.shape[0] != targets.shape[0]:
        raise DimensionError(
            f"weighted_cross_entropy: probs {probabilities.shape} vs targets {targets.shape}")
    p1 = ad.column(probabilities, 1)
    positive = ad.mul_const(ad.log_clamped(p1, LOG_FLOOR), weight * targets)
    negative = ad.mul_const(ad.log_clamped(ad.rsub_const(1.0, p1), LOG_FLOOR),
                            1.0 - targets)
    return ad.scale_const(ad.mean_all(ad.add(positive, negative)), -1.0)


def predict_probabilities(params: ModelParams, config: ModelConfig,
                          x: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Infer-mode P(flooded) for every sample, evaluated in chunks."""
    x = np.asarray(x, dtype=np.float64)
    scores = np.empty(len(x))
    for start in range(0, len(x), chunk):
        probs = forward(params, config, x[start:start + chunk], "infer")
        scores[start:start + chunk] = probs.data[:, 1]
    return scores


# =====================================================================
# Parameter snapshots (shared by early stopping and serialization)
# =====================================================================

def _named_arrays(params: ModelParams, config: ModelConfig) -> list[tuple[str, np.ndarray]]:
    entries: list[tuple[str, np.ndarray]] = []
    if config.uses_fastgrnn:
        p = params.fastgrnn
        entries += [("fastgrnn.W", p.W.data), ("fastgrnn.U", p.U.data),
                    ("fastgrnn.b_z", p.b_z.data), ("fastgrnn.b_h", p.b_h.data),
                    ("fastgrnn.zeta_raw", p.zeta_raw.data),
                    ("fastgrnn.nu_raw", p.nu_raw.data)]
    for i, block in enumerate(params.fcn_blocks):
        entries += [(f"fcn.{i}.kernels", block.kernels.data),
                    (f"fcn.{i}.bias", block.bias.data),
                    (f"fcn.{i}.bn_gamma", block.bn_gamma.data),
                    (f"fcn.{i}.bn_beta", block.bn_beta.data),
                    (f"fcn.{i}.bn_running_mean", block.bn_state.mean),
                    (f"fcn.{i}.bn_running_var", block.bn_state.var)]
    entries += [("head.weights", params.head_weights.data),
                ("head.bias", params.head_bias.data)]
    if params.feature_mean is not None:
        entries += [("scaler.mean", params.feature_mean),
                    ("scaler.std", params.feature_std)]
    return entries


def snapshot(params: ModelParams, config: ModelConfig) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr in _named_arrays(params, config)}


def restore(params: ModelParams, config: ModelConfig, state: dict[str, np.ndarray]) -> None:
    for name, arr in _named_arrays(params, config):
        arr[...] = state[name]


def _expected_shapes(config: ModelConfig, with_scaler: bool) -> list[tuple[str, tuple[int, ...]]]:
    h, d = config.hidden_size, config.time_steps
    shapes: list[tuple[str, tuple[int, ...]]] = []
    if config.uses_fastgrnn:
        shapes += [("fastgrnn.W", (h, d)), ("fastgrnn.U", (h, h)),
                   ("fastgrnn.b_z", (h,)), ("fastgrnn.b_h", (h,)),
                   ("fastgrnn.zeta_raw", ()), ("fastgrnn.nu_raw", ())]
    if config.uses_fcn:
        c_in = config.input_channels
        for i, (c_out, k) in enumerate(zip(config.conv_channels, config.kernel_sizes)):
            shapes += [(f"fcn.{i}.kernels", (c_out, c_in, k)),
                       (f"fcn.{i}.bias", (c_out,)),
                       (f"fcn.{i}.bn_gamma", (c_out,)),
                       (f"fcn.{i}.bn_beta", (c_out,)),
                       (f"fcn.{i}.bn_running_mean", (c_out,)),
                       (f"fcn.{i}.bn_running_var", (c_out,))]
            c_in = c_out
    shapes += [("head.weights", (config.num_classes, config.feature_dim)),
               ("head.bias", (config.num_classes,))]
    if with_scaler:
        shapes += [("scaler.mean", (config.input_channels,)),
                   ("scaler.std", (config.input_channels,))]
    return shapes


# =====================================================================
# Serialization
# =====================================================================

MODEL_MAGIC = b"FLOODCASTMDL"
MODEL_VERSION = 1


def save_model(params: ModelParams, config: ModelConfig, path) -> None:
    """Write a self-describing binary artifact (magic, version, JSON header
    with config and tensor shapes, raw float64 blocks, SHA-256 checksum).
    Round-trips bit-exactly."""
    tensors = _named_arrays(params, config)
    header = {
        "config": config.to_dict(),
        "tensors": [[name, list(arr.shape)] for name, arr in tensors],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = bytearray()
    blob += MODEL_MAGIC
    blob += MODEL_VERSION.to_bytes(4, "little")
    blob += len(header_bytes).to_bytes(8, "little")
    blob += header_bytes
    for _, arr in tensors:
        blob += np.ascontiguousarray(arr, dtype=np.float64).tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_model(path) -> tuple[ModelParams, ModelConfig]:
    with open(path, "rb") as fh:
        raw = fh.read()
    fixed = len(MODEL_MAGIC) + 4 + 8
    if len(raw) < fixed + 32:
        raise CorruptModelError(f"{path}: file truncated ({len(raw)} bytes)")
    if raw[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise CorruptModelError(f"{path}: bad magic, not a model file")
    version = int.from_bytes(raw[len(MODEL_MAGIC):len(MODEL_MAGIC) + 4], "little")
    if version != MODEL_VERSION:
        raise ModelVersionError(
            f"{path}: format version {version}, expected {MODEL_VERSION}")
    if hashlib.sha256(raw[:-32]).digest() != raw[-32:]:
        raise CorruptModelError(f"{path}: checksum mismatch")
    header_len = int.from_bytes(raw[len(MODEL_MAGIC) + 4:fixed], "little")
    if fixed + header_len + 32 > len(raw):
        raise CorruptModelError(f"{path}: file truncated inside header")
    try:
        header = json.loads(raw[fixed:fixed + header_len].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        declared = [(name, tuple(shape)) for name, shape in header["tensors"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptModelError(f"{path}: unreadable header ({exc})") from exc

    with_scaler = any(name == "scaler.mean" for name, _ in declared)
    expected = _expected_shapes(config, with_scaler)
    if declared != expected:
        raise ModelShapeError(
            f"{path}: tensor table does not match config "
            f"(declared {declared[:3]}..., expected {expected[:3]}...)")

    offset = fixed + header_len
    state: dict[str, np.ndarray] = {}
    for name, shape in declared:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 8 * count
        if end > len(raw) - 32:
            raise CorruptModelError(f"{path}: file truncated inside tensor {name}")
        state[name] = np.frombuffer(raw[offset:end], dtype=np.float64).reshape(shape).copy()
        offset = end
    if offset != len(raw) - 32:
        raise CorruptModelError(f"{path}: trailing bytes after tensor data")

    params = init_model(config, Rng(config.seed))
    if with_scaler:
        params.feature_mean = np.zeros(config.input_channels)
        params.feature_std = np.ones(config.input_channels)
    restore(params, config, state)
    return params, config


# =====================================================================
# Training
# =====================================================================

@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0


class _Adam:
    def __init__(self, nodes: list[Node], lr: float, beta1: float,
                 beta2: float, eps: float):
        self.nodes = nodes
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(n.data) for n in nodes]
        self.v = [np.zeros_like(n.data) for n in nodes]
        self.t = 0

    def step(self):
        self.t += 1
        correct1 = 1.0 - self.beta1 ** self.t
        correct2 = 1.0 - self.beta2 ** self.t
        for node, m, v in zip(self.nodes, self.m, self.v):
            g = node.grad
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            node.data -= self.lr * (m / correct1) / (np.sqrt(v / correct2) + self.eps)


def _validate_dataset(name: str, x: np.ndarray, y: np.ndarray, config: ModelConfig):
    if len(x) == 0:
        raise ConfigurationError(f"{name} dataset is empty")
    if x.ndim != 3 or x.shape[1:] != (config.input_channels, config.time_steps):
        raise DimensionError(f"{name} features have shape {x.shape}")
    if y.shape != (len(x),) or not np.isin(y, (0, 1)).all():
        raise ConfigurationError(f"{name} labels must be binary and match sample count")


def _weighted_loss_and_accuracy(params: ModelParams, config: ModelConfig,
                                x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    scores = predict_probabilities(params, config, x)
    p1 = np.clip(scores, LOG_FLOOR, None)
    p0 = np.clip(1.0 - scores, LOG_FLOOR, None)
    loss = float(np.mean(-(config.loss_weight * y * np.log(p1) + (1 - y) * np.log(p0))))
    accuracy = float(np.mean((scores > 0.5).astype(int) == y))
    return loss, accuracy


def train(config: ModelConfig, train_xy: tuple[np.ndarray, np.ndarray],
          val_xy: tuple[np.ndarray, np.ndarray],
          initial_params: ModelParams | None = None) -> tuple[ModelParams, TrainReport]:
    """Mini-batch Adam with early stopping on validation loss.

    Stops when the validation loss has not improved by more than 1e-5 for
    ``patience`` consecutive epochs, and returns the parameters from the
    best-validation epoch.
    """
    x_train = np.asarray(train_xy[0], dtype=np.float64)
    y_train = np.asarray(train_xy[1], dtype=np.int64)
    x_val = np.asarray(val_xy[0], dtype=np.float64)
    y_val = np.asarray(val_xy[1], dtype=np.int64)
    _validate_dataset("train", x_train, y_train, config)
    _validate_dataset("validation", x_val, y_val, config)

    rng = Rng(config.seed)
    if initial_params is not None:
        params = initial_params
    else:
        params = init_model(config, rng.split("init"))
        if config.normalize_features:
            params.feature_mean = x_train.mean(axis=(0, 2))
            params.feature_std = np.maximum(x_train.std(axis=(0, 2)), 1e-6)
    shuffle_rng = rng.split("shuffle")
    dropout_rng = rng.split("dropout")

    trainable = params.trainable()
    optimizer = _Adam(trainable, config.learning_rate, config.adam_beta1,
                      config.adam_beta2, config.adam_epsilon)
    report = TrainReport()
    best_val = math.inf          # exact best, controls the returned snapshot
    patience_ref = math.inf      # delta-gated best, controls early stopping
    bad_epochs = 0
    best_state = snapshot(params, config)

    n = len(x_train)
    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        hits = 0
        for batch_index, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            ad.zero_grads(trainable)
            probs = forward(params, config, xb, "train",
                            dropout_rng.split(epoch, batch_index))
            loss = weighted_cross_entropy(probs, yb, config.loss_weight)
            loss_value = float(loss.data)
            if not math.isfinite(loss_value):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {batch_index}",
                    epoch=epoch, batch=batch_index)
            ad.backward(loss)
            optimizer.step()
            if config.sparsity.active and params.fastgrnn is not None:
                fg.project_sparse(params.fastgrnn, config.sparsity, in_place=True)
            loss_sum += loss_value * len(idx)
            hits += int(((probs.data[:, 1] > 0.5).astype(int) == yb).sum())

        val_loss, val_acc = _weighted_loss_and_accuracy(params, config, x_val, y_val)
        report.train_loss.append(loss_sum / n)
        report.train_accuracy.append(hits / n)
        report.val_loss.append(val_loss)
        report.val_accuracy.append(val_acc)
        report.epoch_seconds.append(time.perf_counter() - started)
        report.stopped_epoch = epoch

        if val_loss < best_val:
            best_val = val_loss
            best_state = snapshot(params, config)
            report.best_epoch = epoch
        if val_loss < patience_ref - EARLY_STOP_MIN_DELTA:
            patience_ref = val_loss
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break

    restore(params, config, best_state)
    return params, report
