"""Cloud preprocessing: ground removal, frame transforms, distillation, box filtering.

The pipeline order is fixed: ground removal, then the vehicle-frame
transform, then frame distillation, then dynamic-object removal. Ground
removal and the frame transform act per frame, so running them only on
the frames that survive distillation yields the same output; the
orchestrator exploits that to skip work on dropped frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import PointCloud, ReferenceFrame, RigidTransform, Rotation3

RANSAC_MAX_ITERS = 200
RANSAC_INLIER_THRESHOLD = 0.15
RANSAC_MIN_INLIER_FRACTION = 0.15
RANSAC_MAX_NORMAL_TILT_DEG = 30.0
DYNAMIC_BOX_MARGIN = 0.25


@dataclass(frozen=True)
class Plane:
    """Plane n . p + d = 0 with unit normal n pointing toward +z."""

    normal: np.ndarray
    offset: float

    def __post_init__(self) -> None:
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = float(np.linalg.norm(n))
        if not math.isclose(norm, 1.0, abs_tol=1e-9):
            raise ValueError(f"plane normal must be unit, got norm {norm}")
        n = n.copy()
        n.flags.writeable = False
        object.__setattr__(self, "normal", n)

    def distances(self, points: np.ndarray) -> np.ndarray:
        """Unsigned point-to-plane distances."""
        return np.abs(points @ self.normal + self.offset)

    def tilt_deg(self) -> float:
        """Angle between the normal and +z in degrees."""
        c = min(1.0, max(-1.0, float(self.normal[2])))
        return math.degrees(math.acos(c))


@dataclass(frozen=True)
class BoundingBox:
    """Upright box: center, half extents along its own axes, yaw about +z."""

    center: np.ndarray
    half_extents: np.ndarray
    yaw_deg: float = 0.0

    def __post_init__(self) -> None:
        c = np.asarray(self.center, dtype=np.float64).reshape(3).copy()
        h = np.asarray(self.half_extents, dtype=np.float64).reshape(3).copy()
        if np.any(h <= 0):
            raise ValueError(f"half extents must be positive, got {h}")
        c.flags.writeable = False
        h.flags.writeable = False
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extents", h)

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Boolean mask of points inside the box inflated by margin."""
        a = math.radians(self.yaw_deg)
        c, s = math.cos(a), math.sin(a)
        rel = points - self.center
        # rotate into the box frame (inverse yaw)
        local = np.empty_like(rel)
        local[:, 0] = c * rel[:, 0] + s * rel[:, 1]
        local[:, 1] = -s * rel[:, 0] + c * rel[:, 1]
        local[:, 2] = rel[:, 2]
        lim = self.half_extents + margin
        return np.all(np.abs(local) <= lim, axis=1)


@dataclass(frozen=True)
class FrameSequence:
    """Time-ordered clouds with exact ego poses and the capture rate.

    point_ids carries per-frame world-point identities when the data came
    from the synthetic renderer (used to build correspondences in tests);
    boxes carries per-frame dynamic-object boxes in the true vehicle
    frame, for filtering after the vehicle-frame transform. Both are
    None when not applicable.
    """

    clouds: tuple[PointCloud, ...]
    poses: tuple[RigidTransform, ...]
    rate_hz: float
    point_ids: tuple[np.ndarray, ...] | None = None
    boxes: tuple[tuple[BoundingBox, ...], ...] | None = None

    def __post_init__(self) -> None:
        clouds = tuple(self.clouds)
        poses = tuple(self.poses)
        if len(clouds) == 0:
            raise ValueError("empty input")
        if len(clouds) != len(poses):
            raise ValueError(f"{len(clouds)} clouds but {len(poses)} poses")
        times = [c.timestamp for c in clouds]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("timestamps must be strictly increasing")
        if not (self.rate_hz > 0):
            raise ValueError(f"rate_hz must be positive, got {self.rate_hz}")
        if self.point_ids is not None and len(self.point_ids) != len(clouds):
            raise ValueError("point_ids length must match clouds")
        if self.boxes is not None and len(self.boxes) != len(clouds):
            raise ValueError("boxes length must match clouds")
        object.__setattr__(self, "clouds", clouds)
        object.__setattr__(self, "poses", poses)
        if self.point_ids is not None:
            object.__setattr__(self, "point_ids", tuple(self.point_ids))
        if self.boxes is not None:
            object.__setattr__(self, "boxes", tuple(tuple(b) for b in self.boxes))

    def __len__(self) -> int:
        return len(self.clouds)


def remove_ground(
    cloud: PointCloud,
    max_iters: int = RANSAC_MAX_ITERS,
    inlier_threshold: float = RANSAC_INLIER_THRESHOLD,
    rng_seed: int = 0,
    min_inlier_fraction: float = RANSAC_MIN_INLIER_FRACTION,
    max_normal_tilt_deg: float = RANSAC_MAX_NORMAL_TILT_DEG,
) -> tuple[PointCloud, Plane | None]:
    """Drop the dominant near-horizontal plane found by RANSAC.

    Samples max_iters random 3-point hypotheses, keeps the one with the
    most inliers among planes tilted at most max_normal_tilt_deg from +z,
    and removes its inliers. If no hypothesis reaches
    min_inlier_fraction support the cloud is returned unchanged with a
    None plane (the no-ground flag). Deterministic in rng_seed.
    """
    n = len(cloud)
    if n < 3:
        raise ValueError(f"ground removal needs at least 3 points, got {n}")
    pts = cloud.points
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    cos_max_tilt = math.cos(math.radians(max_normal_tilt_deg))

    best_count = 0
    best_normal: np.ndarray | None = None
    best_offset = 0.0
    for _ in range(max_iters):
        idx = rng.choice(n, size=3, replace=False)
        a, b, c = pts[idx]
        normal = np.cross(b - a, c - a)
        norm = float(np.linalg.norm(normal))
        if norm < 1e-12:
            continue
        normal = normal / norm
        if normal[2] < 0:
            normal = -normal
        if normal[2] < cos_max_tilt:
            continue
        offset = -float(normal @ a)
        count = int(np.count_nonzero(np.abs(pts @ normal + offset) <= inlier_threshold))
        if count > best_count:
            best_count = count
            best_normal = normal
            best_offset = offset

    if best_normal is None or best_count < min_inlier_fraction * n:
        return cloud, None

    plane = Plane(best_normal, best_offset)
    keep = plane.distances(pts) > inlier_threshold
    return cloud.with_points(pts[keep]), plane


def to_vehicle_frame(cloud: PointCloud, extrinsic: Rotation3) -> PointCloud:
    """Rotate a sensor-frame cloud into the vehicle frame via the mounting extrinsic."""
    if cloud.frame is not ReferenceFrame.SENSOR:
        raise ValueError("double transform: cloud is already in the vehicle frame")
    return PointCloud(extrinsic.apply(cloud.points), ReferenceFrame.VEHICLE, cloud.timestamp)


def selected_frame_indices(n_frames: int, n_t: int) -> list[int]:
    """Distillation indices: endpoints plus evenly spread interior frames.

    Index k of n_t maps to round(k * (n_frames - 1) / (n_t - 1)), with
    halves rounded up. Requires 2 <= n_t <= n_frames.
    """
    if n_t < 2:
        raise ValueError(f"n_t must be >= 2, got {n_t}")
    if n_t > n_frames:
        raise ValueError(f"n_t={n_t} exceeds the {n_frames} available frames")
    step = (n_frames - 1) / (n_t - 1)
    return [int(math.floor(k * step + 0.5)) for k in range(n_t)]


def distilled_rate_hz(rate_hz: float, n_frames: int, n_t: int) -> float:
    """Effective rate after keeping n_t of n_frames: rate / (n_frames / n_t)."""
    return rate_hz / (n_frames / n_t)


def distill_frames(seq: FrameSequence, n_t: int) -> FrameSequence:
    """Keep n_t frames spanning the sequence, endpoints always included."""
    idx = selected_frame_indices(len(seq), n_t)
    return FrameSequence(
        tuple(seq.clouds[i] for i in idx),
        tuple(seq.poses[i] for i in idx),
        distilled_rate_hz(seq.rate_hz, len(seq), n_t),
        None if seq.point_ids is None else tuple(seq.point_ids[i] for i in idx),
        None if seq.boxes is None else tuple(seq.boxes[i] for i in idx),
    )


def remove_dynamic(
    cloud: PointCloud,
    boxes: Sequence[BoundingBox],
    margin: float = DYNAMIC_BOX_MARGIN,
) -> PointCloud:
    """Drop points inside any box inflated by margin; boxes share the cloud's frame."""
    if len(boxes) == 0:
        return cloud
    if len(cloud) == 0:
        return cloud
    drop = np.zeros(len(cloud), dtype=bool)
    for box in boxes:
        drop |= box.contains(cloud.points, margin)
    return cloud.with_points(cloud.points[~drop])


@dataclass(frozen=True)
class PreprocessConfig:
    ransac_max_iters: int = RANSAC_MAX_ITERS
    ransac_inlier_threshold: float = RANSAC_INLIER_THRESHOLD
    ransac_min_inlier_fraction: float = RANSAC_MIN_INLIER_FRACTION
    dynamic_margin: float = DYNAMIC_BOX_MARGIN
    n_t: int = 5


def preprocess_sequence(
    seq: FrameSequence,
    extrinsic: Rotation3,
    cfg: PreprocessConfig,
    rng_seed: int = 0,
) -> FrameSequence:
    """Run the fixed pipeline and return the distilled, cleaned sequence.

    Per-frame work (ground removal, vehicle transform, box filtering) is
    only done for frames that survive distillation; the result is
    identical to processing every frame first. RANSAC seeds derive from
    rng_seed and the original frame index, so the output does not depend
    on which frames were skipped.
    """
    idx = selected_frame_indices(len(seq), cfg.n_t)
    clouds = []
    for i in idx:
        ground_seed = int(np.random.SeedSequence(entropy=rng_seed, spawn_key=(i,)).generate_state(1)[0])
        cloud, _ = remove_ground(
            seq.clouds[i],
            max_iters=cfg.ransac_max_iters,
            inlier_threshold=cfg.ransac_inlier_threshold,
            rng_seed=ground_seed,
            min_inlier_fraction=cfg.ransac_min_inlier_fraction,
        )
        cloud = to_vehicle_frame(cloud, extrinsic)
        if seq.boxes is not None:
            cloud = remove_dynamic(cloud, seq.boxes[i], cfg.dynamic_margin)
        clouds.append(cloud)
    return FrameSequence(
        tuple(clouds),
        tuple(seq.poses[i] for i in idx),
        distilled_rate_hz(seq.rate_hz, len(seq), cfg.n_t),
        None,
        None,
    )
