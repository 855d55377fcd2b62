"""Scene flow between sequential clouds and the analytic flow oracle.

Flow is anchored at the earlier frame: anchors are the source points and
anchor + vector lands on the target-frame position of the same surface.
The estimator fits a small coordinate network u = g(x) per frame pair by
minimizing truncated nearest-neighbor distance into the target cloud;
the oracle computes the exact flow a rigid ego motion produces when the
clouds are observed through a given mount fault.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import OptimState, Tensor2, adamw_step, linear_forward, relu
from .geometry import (
    Point3,
    PointCloud,
    ReferenceFrame,
    RigidTransform,
    RotationError,
)

NN_TRUNCATION_M2 = 2.0


@dataclass(frozen=True)
class FlowField:
    """Per-point flow: anchor positions (source points) and displacement vectors."""

    anchors: np.ndarray
    vectors: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.anchors, dtype=np.float64)
        v = np.asarray(self.vectors, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != 3 or a.shape != v.shape:
            raise ValueError(f"anchors/vectors must be matching (N, 3) arrays, got {a.shape} and {v.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(v))):
            raise ValueError("flow field contains non-finite entries")
        a = a.copy()
        v = v.copy()
        a.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "anchors", a)
        object.__setattr__(self, "vectors", v)

    def __len__(self) -> int:
        return self.anchors.shape[0]

    def advected(self) -> np.ndarray:
        return self.anchors + self.vectors

    @staticmethod
    def concatenate(fields: Sequence[FlowField]) -> FlowField:
        if not fields:
            raise ValueError("empty input")
        return FlowField(
            np.vstack([f.anchors for f in fields]),
            np.vstack([f.vectors for f in fields]),
        )


class SpatialIndex:
    """Exact nearest-neighbor index over a fixed point set."""

    def __init__(self, points: np.ndarray) -> None:
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise ValueError("index requires a nonempty (N, 3) point set")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def query(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Squared distances and indices of the nearest stored point.

        The squared distance is recomputed from coordinates so the value
        is bit-identical to a brute-force scan, not a rounded sqrt^2.
        """
        q = np.asarray(queries, dtype=np.float64)
        if not np.all(np.isfinite(q)):
            raise ValueError("query points contain non-finite coordinates")
        _, i = self._tree.query(q, k=1)
        # queries so remote that the internal distance overflows come back
        # with the sentinel index n; report them as infinitely far
        missing = i == self.points.shape[0]
        i = np.where(missing, 0, i)
        with np.errstate(over="ignore"):
            d2 = np.sum(np.square(q - self.points[i]), axis=1)
        if np.any(missing):
            d2 = np.where(missing, np.inf, d2)
        return d2, i


def build_index(target: PointCloud) -> SpatialIndex:
    if len(target) == 0:
        raise ValueError("empty input")
    return SpatialIndex(target.points)


def nn_distance(query: Point3 | np.ndarray, target: PointCloud, index: SpatialIndex | None = None) -> float:
    """Squared Euclidean distance from query to its nearest target point."""
    if index is None:
        index = build_index(target)
    elif len(index) != len(target):
        raise ValueError("index does not match the target cloud")
    q = query.as_array() if isinstance(query, Point3) else np.asarray(query, dtype=np.float64)
    d2, _ = index.query(q.reshape(1, 3))
    return float(d2[0])


@dataclass(frozen=True)
class FlowSolverConfig:
    """Settings for the per-pair runtime optimization.

    The regularizer C is the mean squared flow magnitude; reg_weight
    defaults to 0 because the small network already smooths the field.
    truncation_m2 caps each point's squared nearest-neighbor distance so
    stray regions cannot dominate the objective.
    """

    hidden_width: int = 64
    hidden_layers: int = 2
    iterations: int = 400
    step_size: float = 0.01
    reg_weight: float = 0.0
    truncation_m2: float = NN_TRUNCATION_M2
    tolerance: float = 1e-7
    patience: int = 40


def _reg_value(vectors: np.ndarray) -> float:
    # overflow to inf is fine here; the solver reports it as divergence
    with np.errstate(over="ignore"):
        return float(np.mean(np.sum(np.square(vectors), axis=1)))


def flow_objective(flow: FlowField, target: PointCloud, cfg: FlowSolverConfig) -> float:
    """Truncated NN data term of the advected anchors plus the weighted regularizer."""
    if len(flow) == 0 or len(target) == 0:
        raise ValueError("empty input")
    index = build_index(target)
    d2, _ = index.query(flow.advected())
    data = float(np.sum(np.minimum(d2, cfg.truncation_m2)))
    return data + cfg.reg_weight * _reg_value(flow.vectors)


class FlowNet:
    """Coordinate network x -> u: linear/relu stack, final layer zero-initialized.

    The zero output layer makes the initial flow exactly zero, so a
    target identical to the source is already optimal at iteration 0.
    """

    def __init__(self, cfg: FlowSolverConfig, rng: np.random.Generator) -> None:
        dims = [3] + [cfg.hidden_width] * cfg.hidden_layers + [3]
        self.weights: list[Tensor2] = []
        self.biases: list[Tensor2] = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            if last:
                w = np.zeros((d_in, d_out))
            else:
                w = rng.normal(scale=1.0 / math.sqrt(d_in), size=(d_in, d_out))
            self.weights.append(Tensor2(w))
            self.biases.append(Tensor2(np.zeros((1, d_out))))

    def params(self) -> dict[str, Tensor2]:
        out: dict[str, Tensor2] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def forward(self, x: np.ndarray) -> Tensor2:
        h = Tensor2(x)
        n = len(self.weights)
        for i in range(n):
            h = linear_forward(h, self.weights[i], self.biases[i])
            if i < n - 1:
                h = relu(h)
        return h

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.values.copy() for k, t in self.params().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, t in self.params().items():
            t.values[...] = snap[k]


def _loss_and_grad_seed(
    u: Tensor2, source: np.ndarray, index: SpatialIndex, cfg: FlowSolverConfig
) -> tuple[float, np.ndarray]:
    """Objective value and dLoss/du for the current flow u at the source points."""
    advected = source + u.values
    d2, idx = index.query(advected)
    active = d2 < cfg.truncation_m2
    data = float(np.sum(np.minimum(d2, cfg.truncation_m2)))
    residual = advected - index.points[idx]
    seed = np.where(active[:, None], 2.0 * residual, 0.0)
    if cfg.reg_weight != 0.0:
        n = source.shape[0]
        data += cfg.reg_weight * _reg_value(u.values)
        seed = seed + cfg.reg_weight * 2.0 * u.values / n
    return data, seed


def estimate_flow(
    source: PointCloud,
    target: PointCloud,
    cfg: FlowSolverConfig,
    rng_seed: int = 0,
) -> FlowField:
    """Fit the coordinate network between two vehicle-frame clouds.

    Runs AdamW (no weight decay) on the truncated NN objective for up to
    cfg.iterations steps, keeps the best-scoring weights, and stops early
    once cfg.patience steps pass without relative improvement beyond
    cfg.tolerance. Deterministic in rng_seed.
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("empty input")
    if source.frame is not target.frame:
        raise ValueError(f"frame mismatch: {source.frame} vs {target.frame}")
    if source.frame is not ReferenceFrame.VEHICLE:
        raise ValueError("flow estimation expects vehicle-frame clouds")

    rng = np.random.Generator(np.random.PCG64(rng_seed))
    net = FlowNet(cfg, rng)
    index = SpatialIndex(target.points)
    opt = OptimState(lr=cfg.step_size, weight_decay=0.0)
    params = net.params()

    best_loss = math.inf
    best_snap = net.snapshot()
    since_improved = 0
    for it in range(cfg.iterations):
        for t in params.values():
            t.zero_grad()
        u = net.forward(source.points)
        if not np.all(np.isfinite(u.values)):
            raise FloatingPointError(f"diverged at iteration {it}")
        loss, seed = _loss_and_grad_seed(u, source.points, index, cfg)
        if not math.isfinite(loss):
            raise FloatingPointError(f"diverged at iteration {it}")
        if loss < best_loss * (1.0 - cfg.tolerance):
            since_improved = 0
        else:
            since_improved += 1
        if loss < best_loss:
            best_loss = loss
            best_snap = net.snapshot()
        if best_loss == 0.0 or since_improved >= cfg.patience:
            break
        u.backward(seed)
        adamw_step(
            {k: t.values for k, t in params.items()},
            {k: t.grad for k, t in params.items()},
            opt,
        )

    net.restore(best_snap)
    vectors = net.forward(source.points).values
    return FlowField(source.points, vectors)


def rotate_flow_oracle(
    cloud: PointCloud,
    ego_motion: RigidTransform,
    mount_error: RotationError,
) -> FlowField:
    """Exact flow of static points under a rigid ego motion seen through a mount fault.

    cloud holds the observed earlier-frame positions x in the vehicle
    frame; ego_motion maps the vehicle's earlier pose to its later pose,
    expressed in the earlier vehicle frame. With E the fault rotation,
    the observed later position of the same surface point is
    E * ego_motion^-1 * E^-1 * x, so the flow is that minus x.
    """
    if len(cloud) == 0:
        raise ValueError("empty input")
    e = mount_error.as_rotation()
    x = cloud.points
    later = e.apply(ego_motion.inverse().apply(e.inverse().apply(x)))
    return FlowField(x, later - x)


def chain_flows(fields: Sequence[FlowField]) -> FlowField:
    """Sum per-point flows across consecutive pairs; anchors come from the first.

    Field k must be built on field k-1's advected cloud so row i always
    follows the same surface point.
    """
    if not fields:
        raise ValueError("empty input")
    first = fields[0]
    total = np.zeros_like(first.vectors)
    for f in fields:
        if len(f) != len(first):
            raise ValueError(f"point-count mismatch: {len(f)} vs {len(first)}")
        total = total + f.vectors
    return FlowField(first.anchors, total)
