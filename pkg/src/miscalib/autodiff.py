"""Reverse-mode autodiff over dense 2D arrays, plus the AdamW optimizer.

Kept deliberately small: a tape of parent links per tensor, explicit
zero-grad between steps, and no graph reuse. All math runs in float64;
checkpoints on disk are float32 and models are snapped to the float32
grid before saving so that save/load reproduces inference bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Tensor2:
    """A rows x cols float64 value with an accumulated gradient."""

    __slots__ = ("values", "grad", "_parents", "_backward")

    def __init__(self, values) -> None:
        v = np.asarray(values, dtype=np.float64)
        if v.ndim == 1:
            v = v.reshape(1, -1)
        if v.ndim != 2:
            raise ValueError(f"Tensor2 requires a 2D value, got shape {v.shape}")
        self.values = v
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor2, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor2:
        return Tensor2(self.values.copy())

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients of this tensor into every upstream tensor.

        Without a seed the tensor must be 1x1 (a scalar loss) and the seed
        is 1. Gradients add into .grad; call zero_grad on parameters
        between optimization steps.
        """
        if seed is None:
            if self.values.size != 1:
                raise ValueError("backward without a seed requires a scalar tensor")
            seed = np.ones_like(self.values)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != self.values.shape:
            raise ValueError(f"seed shape {seed.shape} != value shape {self.values.shape}")

        order: list[Tensor2] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor2, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        _accumulate(self, seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accumulate(t: Tensor2, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _make(values: np.ndarray, parents: tuple[Tensor2, ...], backward) -> Tensor2:
    out = Tensor2(values)
    out._parents = parents
    out._backward = backward
    return out


def linear_forward(x: Tensor2, weight: Tensor2, bias: Tensor2) -> Tensor2:
    """y = x @ weight + bias, bias broadcast over rows."""
    if x.cols != weight.rows:
        raise ValueError(f"shape mismatch: x has {x.cols} cols, weight has {weight.rows} rows")
    if bias.shape != (1, weight.cols):
        raise ValueError(f"bias must be (1, {weight.cols}), got {bias.shape}")
    y = x.values @ weight.values + bias.values

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g @ weight.values.T)
        _accumulate(weight, x.values.T @ g)
        _accumulate(bias, g.sum(axis=0, keepdims=True))

    return _make(y, (x, weight, bias), backward)


@dataclass
class BNState:
    """Running statistics of one batchnorm layer, updated only in train mode."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @staticmethod
    def create(width: int) -> BNState:
        return BNState(np.zeros((1, width)), np.ones((1, width)))

    def copy(self) -> BNState:
        return BNState(self.running_mean.copy(), self.running_var.copy())


def batchnorm_forward(
    x: Tensor2,
    gamma: Tensor2,
    beta: Tensor2,
    state: BNState,
    mode: str,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor2:
    """Per-column batch normalization with scale and shift.

    Train mode normalizes by batch statistics (population variance) and
    folds them into the running stats with the given momentum; eval mode
    applies the running stats exactly and never mutates them.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if gamma.shape != (1, x.cols) or beta.shape != (1, x.cols):
        raise ValueError("gamma and beta must be (1, cols) matching x")

    if mode == "train":
        if x.rows < 2:
            raise ValueError("batch size must be >= 2 in train mode")
        mu = x.values.mean(axis=0, keepdims=True)
        var = x.values.var(axis=0, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.values - mu) * inv
        state.running_mean = (1.0 - momentum) * state.running_mean + momentum * mu
        state.running_var = (1.0 - momentum) * state.running_var + momentum * var

        def backward(g: np.ndarray) -> None:
            n = x.rows
            gxhat = g * gamma.values
            _accumulate(gamma, (g * xhat).sum(axis=0, keepdims=True))
            _accumulate(beta, g.sum(axis=0, keepdims=True))
            # standard batchnorm gradient through mean and variance
            dx = (
                inv
                / n
                * (n * gxhat - gxhat.sum(axis=0, keepdims=True) - xhat * (gxhat * xhat).sum(axis=0, keepdims=True))
            )
            _accumulate(x, dx)

    else:
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.values - state.running_mean) * inv

        def backward(g: np.ndarray) -> None:
            _accumulate(gamma, (g * xhat).sum(axis=0, keepdims=True))
            _accumulate(beta, g.sum(axis=0, keepdims=True))
            _accumulate(x, g * gamma.values * inv)

    y = xhat * gamma.values + beta.values
    return _make(y, (x, gamma, beta), backward)


def relu(x: Tensor2) -> Tensor2:
    mask = x.values > 0.0
    y = np.where(mask, x.values, 0.0)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * mask)

    return _make(y, (x,), backward)


def sigmoid(x: Tensor2) -> Tensor2:
    s = expit(x.values)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * s * (1.0 - s))

    return _make(s, (x,), backward)


def _check_segments(n_rows: int, segments: Sequence[tuple[int, int]]) -> None:
    for start, stop in segments:
        if not (0 <= start < stop <= n_rows):
            raise ValueError(f"bad segment ({start}, {stop}) for {n_rows} rows")


def maxpool_over_points(x: Tensor2, segments: Sequence[tuple[int, int]] | None = None) -> Tensor2:
    """Per-column max over rows; one output row per segment.

    Rows are points; segments delimit samples stacked in one tensor. With
    no segments the whole tensor is one sample. Gradient routes to the
    first maximal row of each segment.
    """
    if x.rows == 0:
        raise ValueError("empty input")
    segs = [(0, x.rows)] if segments is None else list(segments)
    _check_segments(x.rows, segs)
    y = np.empty((len(segs), x.cols))
    argmax = np.empty((len(segs), x.cols), dtype=np.int64)
    for i, (start, stop) in enumerate(segs):
        block = x.values[start:stop]
        idx = np.argmax(block, axis=0)
        argmax[i] = idx + start
        y[i] = block[idx, np.arange(x.cols)]

    def backward(g: np.ndarray) -> None:
        dx = np.zeros_like(x.values)
        cols = np.arange(x.cols)
        for i in range(len(segs)):
            np.add.at(dx, (argmax[i], cols), g[i])
        _accumulate(x, dx)

    return _make(y, (x,), backward)


def meanpool_over_points(x: Tensor2, segments: Sequence[tuple[int, int]] | None = None) -> Tensor2:
    """Per-column mean over rows; one output row per segment."""
    if x.rows == 0:
        raise ValueError("empty input")
    segs = [(0, x.rows)] if segments is None else list(segments)
    _check_segments(x.rows, segs)
    y = np.empty((len(segs), x.cols))
    for i, (start, stop) in enumerate(segs):
        y[i] = x.values[start:stop].mean(axis=0)

    def backward(g: np.ndarray) -> None:
        dx = np.zeros_like(x.values)
        for i, (start, stop) in enumerate(segs):
            dx[start:stop] += g[i] / (stop - start)
        _accumulate(x, dx)

    return _make(y, (x,), backward)


def concat_cols(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.rows != b.rows:
        raise ValueError(f"row mismatch: {a.rows} vs {b.rows}")
    y = np.concatenate([a.values, b.values], axis=1)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g[:, : a.cols])
        _accumulate(b, g[:, a.cols :])

    return _make(y, (a, b), backward)


def add(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    y = a.values + b.values

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(y, (a, b), backward)


def scale(a: Tensor2, k: float) -> Tensor2:
    y = a.values * k

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * k)

    return _make(y, (a,), backward)


def bce_with_logits(logits: Tensor2, targets: np.ndarray) -> Tensor2:
    """Mean binary cross-entropy on logits, in the overflow-safe form.

    Per element: max(z, 0) - z*t + log(1 + exp(-|z|)). The gradient is
    (sigmoid(z) - t) / N. Targets are plain 0/1 values, not tensors.
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ValueError(f"targets shape {t.shape} != logits shape {logits.shape}")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("targets must be 0 or 1")
    z = logits.values
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = per.mean()
    n = z.size

    def backward(g: np.ndarray) -> None:
        _accumulate(logits, g[0, 0] * (expit(z) - t) / n)

    return _make(np.array([[loss]]), (logits,), backward)


@dataclass
class OptimState:
    """AdamW state: first/second moments per parameter plus hyperparameters."""

    lr: float = 8e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimState,
) -> OptimState:
    """One decoupled-weight-decay Adam update, applied to params in place.

    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p).
    Parameters without a gradient entry are skipped; a non-finite gradient
    raises instead of corrupting the parameters.
    """
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"diverged: non-finite gradient for {name!r} at step {t}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.m[name] = m
        v = state.v.get(name)
        if v is None:
            v = np.zeros_like(p)
            state.v[name] = v
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        p -= state.lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p)
    return state


def quantize_float32(arrays: Mapping[str, np.ndarray]) -> None:
    """Snap arrays in place to the float32 grid (round trip through float32).

    Done before serialization so that a model in memory and its float32
    checkpoint describe bit-identical inference.
    """
    for a in arrays.values():
        a[...] = a.astype(np.float32).astype(np.float64)
