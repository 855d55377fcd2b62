"""Flow-field features: handcrafted geometric statistics and the learned embedding.

The geometric vector concatenates, for each coordinate pair (yz, xz,
xy): mean and population std of the 2D cross value between anchor and
flow, mean and std of the projected flow magnitude, and the components
of the mean unit flow direction (cos, sin of each angle, averaged). The
mean direction is stored as a vector rather than an angle so the feature
stays continuous across the 180-degree wrap; its norm is the circular
resultant length. Three global magnitude statistics and three normalized
angle histograms follow, for 21 + 3 * n_bins values in total.

All statistics reduce in a canonical (sorted) order, so permuting the
flow vectors reproduces the vector bit for bit; the angle-derived
slices are also invariant to positive rescaling of the flow vectors.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .autodiff import BNState, Tensor2, batchnorm_forward, concat_cols, linear_forward, maxpool_over_points, meanpool_over_points, relu
from .sceneflow import FlowField

DEFAULT_N_BINS = 72
DEGENERATE_EPS = 1e-9

# (name, indices into xyz) in fixed order; the first index is the 2D
# abscissa and the second the ordinate for angles and cross values
AXIS_PAIRS: tuple[tuple[str, tuple[int, int]], ...] = (
    ("yz", (1, 2)),
    ("xz", (0, 2)),
    ("xy", (0, 1)),
)

ENCODER_CHANNELS = (64, 128)
ENCODER_OUTPUT_DIM = 2 * ENCODER_CHANNELS[-1]


def geometric_feature_layout(n_bins: int = DEFAULT_N_BINS) -> tuple[tuple[str, int], ...]:
    """Ordered (name, width) slices of the geometric vector."""
    if n_bins < 1:
        raise ValueError(f"n_bins must be positive, got {n_bins}")
    layout: list[tuple[str, int]] = []
    for pair_name, _ in AXIS_PAIRS:
        layout.extend(
            [
                (f"{pair_name}_cross_mean", 1),
                (f"{pair_name}_cross_std", 1),
                (f"{pair_name}_proj_mag_mean", 1),
                (f"{pair_name}_proj_mag_std", 1),
                (f"{pair_name}_dir_mean_cos", 1),
                (f"{pair_name}_dir_mean_sin", 1),
            ]
        )
    layout.extend([("mag_mean", 1), ("mag_std", 1), ("mag_median", 1)])
    for pair_name, _ in AXIS_PAIRS:
        layout.append((f"hist_{pair_name}", n_bins))
    return tuple(layout)


def geometric_feature_dim(n_bins: int = DEFAULT_N_BINS) -> int:
    return 21 + 3 * n_bins


def layout_hash(n_bins: int = DEFAULT_N_BINS) -> bytes:
    """Digest of the slice layout, stored in checkpoints to reject mismatches."""
    desc = ";".join(f"{name}:{width}" for name, width in geometric_feature_layout(n_bins))
    return hashlib.sha256(f"n_bins={n_bins};{desc}".encode()).digest()


@dataclass(frozen=True)
class GeometricFeatureVector:
    values: np.ndarray
    n_bins: int

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.shape[0] != geometric_feature_dim(self.n_bins):
            raise ValueError(
                f"expected {geometric_feature_dim(self.n_bins)} values for "
                f"n_bins={self.n_bins}, got {v.shape[0]}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("geometric features contain non-finite values")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def slices(self) -> dict[str, np.ndarray]:
        out = {}
        offset = 0
        for name, width in geometric_feature_layout(self.n_bins):
            out[name] = self.values[offset : offset + width]
            offset += width
        return out


def _pair_indices(pair: str) -> tuple[int, int]:
    for name, idx in AXIS_PAIRS:
        if name == pair:
            return idx
    raise ValueError(f"unknown axis pair {pair!r}; expected one of yz, xz, xy")


def _ordered_mean(values: np.ndarray) -> float:
    """Mean with a canonical summation order, so any permutation of the
    same values gives the bitwise-identical result."""
    return float(np.sort(values).mean())


def _ordered_mean_std(values: np.ndarray) -> tuple[float, float]:
    s = np.sort(values)
    m = float(s.mean())
    return m, float(math.sqrt(np.sort(np.square(s - m)).mean()))


def flow_magnitudes(flows: FlowField) -> tuple[float, float, float]:
    """Mean, population std and median of the flow vector norms."""
    if len(flows) < 2:
        raise ValueError(f"need at least 2 flow vectors, got {len(flows)}")
    mags = np.linalg.norm(flows.vectors, axis=1)
    mean, std = _ordered_mean_std(mags)
    return mean, std, float(np.median(mags))


def _valid_angle_mask(u: np.ndarray) -> np.ndarray:
    return ~((np.abs(u[:, 0]) < DEGENERATE_EPS) & (np.abs(u[:, 1]) < DEGENERATE_EPS))


def projected_angles_deg(flows: FlowField, pair: str) -> np.ndarray:
    """Direction of each flow vector in the pair's plane, degrees in [0, 360).

    Vectors with both projected components below the degenerate
    threshold are dropped; raises if none survive.
    """
    a, b = _pair_indices(pair)
    u = flows.vectors[:, (a, b)]
    mask = _valid_angle_mask(u)
    if not np.any(mask):
        raise ValueError("no valid angles")
    ang = np.degrees(np.arctan2(u[mask, 1], u[mask, 0]))
    return np.mod(ang, 360.0)


def angle_histogram(flows: FlowField, pair: str, n_bins: int = DEFAULT_N_BINS) -> np.ndarray:
    """Normalized histogram of projected flow directions over [0, 360)."""
    if n_bins < 1:
        raise ValueError(f"n_bins must be positive, got {n_bins}")
    ang = projected_angles_deg(flows, pair)
    idx = np.floor(ang / (360.0 / n_bins)).astype(np.int64)
    np.clip(idx, 0, n_bins - 1, out=idx)
    hist = np.bincount(idx, minlength=n_bins).astype(np.float64)
    return hist / hist.sum()


def cross_values(flows: FlowField, pair: str) -> np.ndarray:
    """Per-vector 2D cross value anchor x flow in the pair's plane.

    The cross value of anchor p and flow u over pair (a, b) is
    p_a * u_b - p_b * u_a; its sign tells on which side of the radial
    direction the flow points.
    """
    if len(flows) < 1:
        raise ValueError("empty input")
    a, b = _pair_indices(pair)
    p = flows.anchors
    u = flows.vectors
    return p[:, a] * u[:, b] - p[:, b] * u[:, a]


def cross_features(flows: FlowField, pair: str) -> tuple[float, float]:
    """Mean and population std of the cross values in the pair's plane."""
    return _ordered_mean_std(cross_values(flows, pair))


def _pair_stats(flows: FlowField, pair: str) -> list[float]:
    a, b = _pair_indices(pair)
    u = flows.vectors[:, (a, b)]
    cross_mean, cross_std = cross_features(flows, pair)
    proj_mean, proj_std = _ordered_mean_std(np.linalg.norm(u, axis=1))
    mask = _valid_angle_mask(u)
    if not np.any(mask):
        # a pair with no in-plane motion (exact straight-line flow seen
        # from the side) carries no direction: zero resultant
        cos_mean = sin_mean = 0.0
    else:
        ang = np.arctan2(u[mask, 1], u[mask, 0])
        cos_mean = _ordered_mean(np.cos(ang))
        sin_mean = _ordered_mean(np.sin(ang))
    return [
        cross_mean,
        cross_std,
        proj_mean,
        proj_std,
        cos_mean,
        sin_mean,
    ]


def build_geometric_vector(flows: FlowField, n_bins: int = DEFAULT_N_BINS) -> GeometricFeatureVector:
    """Assemble the full geometric vector for one flow field.

    A single pair may be angle-degenerate (its histogram goes uniform,
    its direction resultant to zero); a field degenerate in every pair,
    meaning zero motion, is an error rather than a zero-filled vector.
    """
    if len(flows) < 2:
        raise ValueError(f"need at least 2 flow vectors, got {len(flows)}")
    if float(np.max(np.abs(flows.vectors))) < DEGENERATE_EPS:
        raise ValueError("no valid angles")
    values: list[float] = []
    for pair_name, _ in AXIS_PAIRS:
        values.extend(_pair_stats(flows, pair_name))
    values.extend(flow_magnitudes(flows))
    parts = [np.asarray(values)]
    for pair_name, idx in AXIS_PAIRS:
        if np.any(_valid_angle_mask(flows.vectors[:, idx])):
            parts.append(angle_histogram(flows, pair_name, n_bins))
        else:
            parts.append(np.full(n_bins, 1.0 / n_bins))
    return GeometricFeatureVector(np.concatenate(parts), n_bins)


def encoder_param_shapes() -> dict[str, tuple[int, int]]:
    """Shapes of the per-point encoder parameters, keyed by tensor name."""
    c1, c2 = ENCODER_CHANNELS
    return {
        "enc1.weight": (3, c1),
        "enc1.bias": (1, c1),
        "enc1.gamma": (1, c1),
        "enc1.beta": (1, c1),
        "enc2.weight": (c1, c2),
        "enc2.bias": (1, c2),
        "enc2.gamma": (1, c2),
        "enc2.beta": (1, c2),
    }


def encode_global(
    vectors: np.ndarray,
    params: Mapping[str, Tensor2],
    bn_states: Mapping[str, BNState],
    mode: str,
    segments: Sequence[tuple[int, int]] | None = None,
) -> Tensor2:
    """Permutation-invariant embedding of stacked flow vectors.

    Two shared per-point blocks (linear, batchnorm, relu) lift each flow
    vector to ENCODER_CHANNELS[-1] features; per-channel max and mean
    pools over each segment are then concatenated. With S segments the
    result is (S, ENCODER_OUTPUT_DIM). Batchnorm in train mode runs over
    all stacked points of the batch.
    """
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] == 0:
        raise ValueError(f"vectors must be a nonempty (N, 3) array, got {v.shape}")
    h: Tensor2 = Tensor2(v)
    for layer in ("enc1", "enc2"):
        h = linear_forward(h, params[f"{layer}.weight"], params[f"{layer}.bias"])
        h = batchnorm_forward(h, params[f"{layer}.gamma"], params[f"{layer}.beta"], bn_states[layer], mode)
        h = relu(h)
    return concat_cols(maxpool_over_points(h, segments), meanpool_over_points(h, segments))
