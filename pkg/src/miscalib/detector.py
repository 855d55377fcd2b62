"""Learned misalignment detector over estimated flow fields.

Two input branches share a trunk: a per-point encoder pools flow
vectors into a global embedding, and a three-block MLP transforms the
handcrafted geometric vector. Their concatenation feeds two small
heads, one yielding a single misalignment logit and one yielding a
logit per rotation axis in (roll, pitch, yaw) order.

Training minimizes the global binary cross-entropy plus the mean
cross-entropy of the axis logits. Labels must be consistent: a sample
is misaligned exactly when at least one axis label is set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .autodiff import (
    BNState,
    OptimState,
    Tensor2,
    adamw_step,
    add,
    batchnorm_forward,
    bce_with_logits,
    concat_cols,
    linear_forward,
    quantize_float32,
    relu,
    scale,
)
from .features import (
    DEFAULT_N_BINS,
    ENCODER_OUTPUT_DIM,
    GeometricFeatureVector,
    build_geometric_vector,
    encode_global,
    encoder_param_shapes,
    geometric_feature_dim,
)
from .geometry import SeverityBucket
from .sceneflow import FlowField

DECISION_THRESHOLD = 0.5
AXIS_NAMES = ("roll", "pitch", "yaw")

GEO_WIDTHS = (256, 128, 128)
HEAD_WIDTH = 128
JOINT_DIM = ENCODER_OUTPUT_DIM + GEO_WIDTHS[-1]

BN_LAYERS = ("enc1", "enc2", "geo1", "geo2", "geo3")


def detector_param_shapes(n_bins: int = DEFAULT_N_BINS) -> dict[str, tuple[int, int]]:
    """Shapes of every trainable tensor, keyed by checkpoint name."""
    shapes = dict(encoder_param_shapes())
    dims = [geometric_feature_dim(n_bins), *GEO_WIDTHS]
    for i in range(len(GEO_WIDTHS)):
        name = f"geo{i + 1}"
        shapes[f"{name}.weight"] = (dims[i], dims[i + 1])
        shapes[f"{name}.bias"] = (1, dims[i + 1])
        shapes[f"{name}.gamma"] = (1, dims[i + 1])
        shapes[f"{name}.beta"] = (1, dims[i + 1])
    for head, out_dim in (("headg", 1), ("heada", 3)):
        shapes[f"{head}1.weight"] = (JOINT_DIM, HEAD_WIDTH)
        shapes[f"{head}1.bias"] = (1, HEAD_WIDTH)
        shapes[f"{head}2.weight"] = (HEAD_WIDTH, out_dim)
        shapes[f"{head}2.bias"] = (1, out_dim)
    return shapes


@dataclass(frozen=True)
class DetectorSample:
    """One training or evaluation item: capped flow vectors plus labels."""

    vectors: np.ndarray
    geometric: GeometricFeatureVector
    label_axes: tuple[bool, bool, bool]
    label_global: bool
    bucket: SeverityBucket

    def __post_init__(self) -> None:
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] == 0:
            raise ValueError(f"vectors must be a nonempty (N, 3) array, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("vectors contain non-finite values")
        object.__setattr__(self, "vectors", v)
        axes = tuple(bool(a) for a in self.label_axes)
        if len(axes) != 3:
            raise ValueError(f"label_axes must have 3 entries, got {len(axes)}")
        object.__setattr__(self, "label_axes", axes)
        if bool(self.label_global) != any(axes):
            raise ValueError("inconsistent labels: the global label must be the OR of the axis labels")
        if (self.bucket == SeverityBucket.ALIGNED) == self.label_global:
            raise ValueError("inconsistent labels: bucket does not match the global label")


@dataclass(frozen=True)
class Verdict:
    """Thresholded scores for one flow field."""

    global_score: float
    axis_scores: tuple[float, float, float]
    misaligned: bool
    axes: tuple[bool, bool, bool]


@dataclass
class DetectorModel:
    n_bins: int
    params: dict[str, Tensor2]
    bn_states: dict[str, BNState]

    @staticmethod
    def create(seed: int, n_bins: int = DEFAULT_N_BINS) -> "DetectorModel":
        """Fresh model: weights uniform in +-1/sqrt(fan_in), biases zero."""
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor2] = {}
        for name, shape in detector_param_shapes(n_bins).items():
            if name.endswith(".weight"):
                bound = 1.0 / np.sqrt(shape[0])
                params[name] = Tensor2(rng.uniform(-bound, bound, size=shape))
            elif name.endswith(".gamma"):
                params[name] = Tensor2(np.ones(shape))
            else:
                params[name] = Tensor2(np.zeros(shape))
        bn_states = {layer: BNState.create(params[f"{layer}.gamma"].cols) for layer in BN_LAYERS}
        return DetectorModel(n_bins, params, bn_states)

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Parameter and running-statistic arrays, by checkpoint name."""
        out = {name: t.values for name, t in self.params.items()}
        for layer, state in self.bn_states.items():
            out[f"{layer}.running_mean"] = state.running_mean
            out[f"{layer}.running_var"] = state.running_var
        return out

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Overwrite every tensor in place from a name-to-array mapping."""
        own = self.named_arrays()
        missing = sorted(set(own) - set(arrays))
        if missing:
            raise ValueError(f"missing tensors: {', '.join(missing)}")
        unknown = sorted(set(arrays) - set(own))
        if unknown:
            raise ValueError(f"unknown tensors: {', '.join(unknown)}")
        for name, dst in own.items():
            src = np.asarray(arrays[name], dtype=np.float64)
            if src.shape != dst.shape:
                raise ValueError(f"{name}: shape {src.shape} != expected {dst.shape}")
            dst[...] = src

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def _geo_branch(self, geo: Tensor2, mode: str) -> Tensor2:
        h = geo
        for i in range(len(GEO_WIDTHS)):
            name = f"geo{i + 1}"
            h = linear_forward(h, self.params[f"{name}.weight"], self.params[f"{name}.bias"])
            h = batchnorm_forward(
                h, self.params[f"{name}.gamma"], self.params[f"{name}.beta"], self.bn_states[name], mode
            )
            h = relu(h)
        return h

    def _head(self, joint: Tensor2, prefix: str) -> Tensor2:
        h = linear_forward(joint, self.params[f"{prefix}1.weight"], self.params[f"{prefix}1.bias"])
        h = relu(h)
        return linear_forward(h, self.params[f"{prefix}2.weight"], self.params[f"{prefix}2.bias"])

    def forward(
        self,
        stacked_vectors: np.ndarray,
        segments: Sequence[tuple[int, int]],
        geo_matrix: np.ndarray,
        mode: str,
    ) -> tuple[Tensor2, Tensor2]:
        """Logits for a batch of samples stacked along the point axis.

        Returns (global logits (B, 1), axis logits (B, 3)) where B is
        the number of segments; geo_matrix is the (B, D) stack of
        geometric vectors in the same order.
        """
        geo = np.asarray(geo_matrix, dtype=np.float64)
        if geo.ndim != 2 or geo.shape[1] != geometric_feature_dim(self.n_bins):
            raise ValueError(
                f"geo_matrix must be (B, {geometric_feature_dim(self.n_bins)}), got {geo.shape}"
            )
        if geo.shape[0] != len(segments):
            raise ValueError(f"{geo.shape[0]} geometric rows for {len(segments)} segments")
        embedding = encode_global(stacked_vectors, self.params, self.bn_states, mode, segments)
        joint = concat_cols(embedding, self._geo_branch(Tensor2(geo), mode))
        return self._head(joint, "headg"), self._head(joint, "heada")

    def forward_samples(self, samples: Sequence[DetectorSample], mode: str) -> tuple[Tensor2, Tensor2]:
        if not samples:
            raise ValueError("empty input")
        stacked = np.concatenate([s.vectors for s in samples], axis=0)
        segments = []
        offset = 0
        geo_rows = []
        for s in samples:
            if s.geometric.n_bins != self.n_bins:
                raise ValueError(f"sample built with n_bins={s.geometric.n_bins}, model has {self.n_bins}")
            segments.append((offset, offset + s.vectors.shape[0]))
            offset += s.vectors.shape[0]
            geo_rows.append(s.geometric.values)
        return self.forward(stacked, segments, np.stack(geo_rows), mode)

    def predict(self, flows: FlowField, threshold: float = DECISION_THRESHOLD) -> Verdict:
        """Score one flow field in eval mode, using every given vector."""
        geo = build_geometric_vector(flows, self.n_bins)
        logits_g, logits_a = self.forward(
            flows.vectors, [(0, len(flows))], geo.values.reshape(1, -1), "eval"
        )
        g = float(expit(logits_g.values[0, 0]))
        a = expit(logits_a.values[0])
        return Verdict(
            global_score=g,
            axis_scores=(float(a[0]), float(a[1]), float(a[2])),
            misaligned=g > threshold,
            axes=tuple(float(s) > threshold for s in a),
        )


def detector_loss(
    logits_global: Tensor2,
    logits_axes: Tensor2,
    labels_global: np.ndarray,
    labels_axes: np.ndarray,
    axis_weight: float = 1.0,
) -> Tensor2:
    """Global cross-entropy plus axis_weight times the mean axis cross-entropy."""
    lg = np.asarray(labels_global, dtype=np.float64).reshape(-1, 1)
    la = np.asarray(labels_axes, dtype=np.float64)
    if np.any((lg > 0) != (la > 0).any(axis=1, keepdims=True)):
        raise ValueError("inconsistent labels: the global label must be the OR of the axis labels")
    loss = bce_with_logits(logits_global, lg)
    return add(loss, scale(bce_with_logits(logits_axes, la), axis_weight))


@dataclass(frozen=True)
class SplitIndices:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]


def stratified_split(
    buckets: Sequence[SeverityBucket],
    seed: int,
    val_fraction: float = 0.15,
    test_fraction: float = 0.15,
) -> SplitIndices:
    """Disjoint train/val/test indices with per-bucket proportions.

    Each severity bucket is shuffled and cut independently, so every
    split sees roughly the requested share of each bucket.
    """
    if val_fraction < 0 or test_fraction < 0 or val_fraction + test_fraction >= 1:
        raise ValueError("fractions must be nonnegative and sum below 1")
    rng = np.random.default_rng(seed)
    groups: dict[int, list[int]] = {}
    for i, b in enumerate(buckets):
        groups.setdefault(int(b), []).append(i)
    train: list[int] = []
    val: list[int] = []
    test: list[int] = []
    for key in sorted(groups):
        idx = np.array(groups[key])
        rng.shuffle(idx)
        n = len(idx)
        n_val = int(round(n * val_fraction))
        n_test = int(round(n * test_fraction))
        if n_val + n_test >= n:
            n_val = max(0, n - 1 - n_test)
        val.extend(idx[:n_val].tolist())
        test.extend(idx[n_val : n_val + n_test].tolist())
        train.extend(idx[n_val + n_test :].tolist())
    return SplitIndices(tuple(sorted(train)), tuple(sorted(val)), tuple(sorted(test)))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 8e-3
    weight_decay: float = 1e-4
    axis_loss_weight: float = 1.0
    val_fraction: float = 0.15
    test_fraction: float = 0.15
    seed: int = 0
    threshold: float = DECISION_THRESHOLD

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for train-mode batchnorm")


@dataclass
class TrainResult:
    split: SplitIndices
    history: list[dict] = field(default_factory=list)


def _targets(samples: Sequence[DetectorSample]) -> tuple[np.ndarray, np.ndarray]:
    lg = np.array([[1.0 if s.label_global else 0.0] for s in samples])
    la = np.array([[1.0 if a else 0.0 for a in s.label_axes] for s in samples])
    return lg, la


def _eval_metrics(
    model: DetectorModel,
    samples: Sequence[DetectorSample],
    indices: Sequence[int],
    axis_weight: float,
    threshold: float,
    batch_size: int = 256,
) -> tuple[float, float]:
    """(mean loss, global accuracy) over the indexed samples in eval mode."""
    losses = []
    correct = 0
    for start in range(0, len(indices), batch_size):
        chunk = [samples[i] for i in indices[start : start + batch_size]]
        logits_g, logits_a = model.forward_samples(chunk, "eval")
        lg, la = _targets(chunk)
        loss = detector_loss(logits_g, logits_a, lg, la, axis_weight)
        losses.append(float(loss.values[0, 0]) * len(chunk))
        decided = expit(logits_g.values[:, 0]) > threshold
        correct += int(np.sum(decided == (lg[:, 0] > 0)))
    return sum(losses) / len(indices), correct / len(indices)


def train_detector(
    model: DetectorModel,
    samples: Sequence[DetectorSample],
    config: TrainConfig = TrainConfig(),
) -> TrainResult:
    """Fit the model in place and return the split plus per-epoch history.

    After the last epoch every tensor is snapped to the float32 grid so
    that saving and reloading the model reproduces inference bit for bit.
    """
    if len(samples) < 4:
        raise ValueError(f"need at least 4 samples, got {len(samples)}")
    split = stratified_split(
        [s.bucket for s in samples], config.seed, config.val_fraction, config.test_fraction
    )
    train_labels = {samples[i].label_global for i in split.train}
    if len(train_labels) < 2:
        raise ValueError("training split needs both aligned and misaligned samples")

    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(1,)))
    optim = OptimState(lr=config.learning_rate, weight_decay=config.weight_decay)
    param_values = {name: t.values for name, t in model.params.items()}
    result = TrainResult(split=split)

    for epoch in range(config.epochs):
        order = np.array(split.train)
        rng.shuffle(order)
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            if len(batch_idx) < 2:
                continue  # train-mode batchnorm needs at least two rows
            batch = [samples[i] for i in batch_idx]
            model.zero_grad()
            try:
                logits_g, logits_a = model.forward_samples(batch, "train")
                lg, la = _targets(batch)
                loss = detector_loss(logits_g, logits_a, lg, la, config.axis_loss_weight)
                loss.backward()
                grads = {name: t.grad for name, t in model.params.items() if t.grad is not None}
                adamw_step(param_values, grads, optim)
            except FloatingPointError as exc:
                raise FloatingPointError(f"diverged in epoch {epoch}: {exc}") from exc
            epoch_losses.append(float(loss.values[0, 0]))
        entry = {"epoch": epoch, "train_loss": sum(epoch_losses) / max(1, len(epoch_losses))}
        if split.val:
            val_loss, val_acc = _eval_metrics(
                model, samples, split.val, config.axis_loss_weight, config.threshold
            )
            entry["val_loss"] = val_loss
            entry["val_accuracy"] = val_acc
        result.history.append(entry)

    quantize_float32(model.named_arrays())
    return result
