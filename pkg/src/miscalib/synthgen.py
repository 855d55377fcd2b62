"""Synthetic labeled datasets: static scenes, ego trajectories, rendered clouds.

A scene is a frozen set of world-frame surface points (ground plane,
boxes, poles, walls) with measurement noise baked in along the surface
normals. Rendering then applies only exact rigid transforms per frame,
so flows computed between rendered frames agree with the closed-form
flow of the same rigid motion to floating-point accuracy.

Dataset planning is separate from rendering: a plan fixes every label
and seed up front, which makes generation embarrassingly parallel and
bit-deterministic regardless of worker count or order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import (
    COMBINATION_KEYS,
    PointCloud,
    ReferenceFrame,
    RigidTransform,
    Rotation3,
    RotationError,
    SeverityBucket,
    classify_severity,
    combination_axes,
    rotation_from_euler,
    sample_error,
)
from .preprocess import BoundingBox, FrameSequence

TRAJECTORY_KINDS = ("straight", "arc", "lane-change")
LANE_CHANGE_SHIFT_M = 3.5

# purpose ids for per-sample child seeds; the (sample, purpose) pair
# addresses one independent stream inside the dataset's seed tree
SEED_PURPOSE_SCENE = 0
SEED_PURPOSE_TRAJECTORY = 1
SEED_PURPOSE_ERROR = 2
SEED_PURPOSE_RENDER = 3

MAX_BUCKET_DRAWS = 20000


def child_seed(dataset_seed: int, sample_index: int, purpose: int, attempt: int | None = None) -> int:
    key = (sample_index, purpose) if attempt is None else (sample_index, purpose, attempt)
    ss = np.random.SeedSequence(entropy=dataset_seed, spawn_key=key)
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class TrajectorySpec:
    """Planar ego path sampled at a fixed rate, starting at the origin heading +x."""

    kind: str
    speed_mps: float = 10.0
    duration_s: float = 1.0
    rate_hz: float = 10.0
    curvature: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if not (self.speed_mps > 0):
            raise ValueError(f"speed must be positive, got {self.speed_mps}")
        if not (self.rate_hz > 0):
            raise ValueError(f"frame rate must be positive, got {self.rate_hz}")
        if not (self.duration_s > 0):
            raise ValueError(f"duration must be positive, got {self.duration_s}")
        if self.kind == "arc" and self.curvature == 0.0:
            raise ValueError("arc trajectories need a nonzero curvature")

    def frame_count(self) -> int:
        return int(math.floor(self.duration_s * self.rate_hz)) + 1

    def pose_at(self, t: float) -> RigidTransform:
        """Vehicle-to-world transform at time t (z = 0, heading about +z)."""
        v = self.speed_mps
        if self.kind == "straight":
            pos = np.array([v * t, 0.0, 0.0])
            heading = 0.0
        elif self.kind == "arc":
            omega = v * self.curvature
            radius = 1.0 / self.curvature
            pos = np.array([radius * math.sin(omega * t), radius * (1.0 - math.cos(omega * t)), 0.0])
            heading = omega * t
        else:  # lane-change: longitudinal speed v, smooth lateral shift
            phase = math.pi * t / self.duration_s
            y = 0.5 * LANE_CHANGE_SHIFT_M * (1.0 - math.cos(phase))
            dy = 0.5 * LANE_CHANGE_SHIFT_M * (math.pi / self.duration_s) * math.sin(phase)
            pos = np.array([v * t, y, 0.0])
            heading = math.atan2(dy, v)
        return RigidTransform(rotation_from_euler(0.0, 0.0, math.degrees(heading)), pos)

    def poses(self) -> tuple[tuple[float, ...], tuple[RigidTransform, ...]]:
        times = tuple(k / self.rate_hz for k in range(self.frame_count()))
        return times, tuple(self.pose_at(t) for t in times)


@dataclass(frozen=True)
class SceneSpec:
    """Counts and size ranges for the scene primitives, plus the point budget."""

    seed: int = 0
    include_ground: bool = True
    ground_extent: tuple[float, float, float, float] = (-10.0, 70.0, -12.0, 12.0)
    n_boxes: int = 8
    box_side: tuple[float, float] = (0.5, 3.0)
    box_height: tuple[float, float] = (0.5, 2.5)
    box_yaw: tuple[float, float] = (0.0, 360.0)
    n_poles: int = 10
    pole_radius: tuple[float, float] = (0.05, 0.2)
    pole_height: tuple[float, float] = (2.0, 6.0)
    n_walls: int = 4
    wall_length: tuple[float, float] = (10.0, 40.0)
    wall_height: tuple[float, float] = (2.0, 4.0)
    wall_offset: tuple[float, float] = (6.0, 11.0)
    n_points: int = 20000
    noise_sigma_m: float = 0.02

    def __post_init__(self) -> None:
        if min(self.n_boxes, self.n_poles, self.n_walls) < 0:
            raise ValueError("primitive counts must be nonnegative")
        if self.noise_sigma_m < 0:
            raise ValueError(f"noise sigma must be nonnegative, got {self.noise_sigma_m}")
        if self.n_points < 1:
            raise ValueError(f"point budget must be positive, got {self.n_points}")
        x0, x1, y0, y1 = self.ground_extent
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"degenerate ground extent {self.ground_extent}")
        for lo, hi in (
            self.box_side,
            self.box_height,
            self.pole_radius,
            self.pole_height,
            self.wall_length,
            self.wall_height,
            self.wall_offset,
        ):
            if not (0 < lo <= hi):
                raise ValueError(f"bad size range ({lo}, {hi})")
        if self.box_yaw[0] > self.box_yaw[1]:
            raise ValueError(f"bad yaw range {self.box_yaw}")


@dataclass(frozen=True)
class WorldScene:
    """Frozen world-frame surface points; ground_mask marks ground-plane points."""

    points: np.ndarray
    ground_mask: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.points, dtype=np.float64)
        m = np.asarray(self.ground_mask, dtype=bool)
        if p.ndim != 2 or p.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {p.shape}")
        if m.shape != (p.shape[0],):
            raise ValueError(f"ground_mask shape {m.shape} does not match {p.shape[0]} points")
        p = p.copy()
        m = m.copy()
        p.flags.writeable = False
        m.flags.writeable = False
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "ground_mask", m)

    def __len__(self) -> int:
        return self.points.shape[0]


class _Surface:
    """One sampleable surface patch: area plus a uniform point sampler."""

    def __init__(self, area: float, sampler, is_ground: bool = False) -> None:
        self.area = area
        self.sampler = sampler
        self.is_ground = is_ground


def _ground_surface(extent: tuple[float, float, float, float]) -> _Surface:
    x0, x1, y0, y1 = extent

    def sample(rng: np.random.Generator, n: int):
        pts = np.column_stack(
            [rng.uniform(x0, x1, n), rng.uniform(y0, y1, n), np.zeros(n)]
        )
        normals = np.tile([0.0, 0.0, 1.0], (n, 1))
        return pts, normals

    return _Surface((x1 - x0) * (y1 - y0), sample, is_ground=True)


def _box_face_surfaces(center_xy, hx, hy, hz, yaw_deg) -> list[_Surface]:
    # four sides plus the top; the bottom sits on the ground
    a = math.radians(yaw_deg)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    cx, cy = center_xy

    def make_face(local_sampler, area):
        def sample(rng: np.random.Generator, n: int):
            local_pts, local_norms = local_sampler(rng, n)
            world_xy = local_pts[:, :2] @ rot.T + [cx, cy]
            pts = np.column_stack([world_xy, local_pts[:, 2]])
            norm_xy = local_norms[:, :2] @ rot.T
            normals = np.column_stack([norm_xy, local_norms[:, 2]])
            return pts, normals

        return _Surface(area, sample)

    def side(axis: int, sign: float):
        # face at local x = sign*hx (axis 0) or y = sign*hy (axis 1)
        half = (hy, hx)[axis]

        def sampler(rng, n):
            u = rng.uniform(-half, half, n)
            z = rng.uniform(0.0, 2 * hz, n)
            if axis == 0:
                pts = np.column_stack([np.full(n, sign * hx), u, z])
                normals = np.tile([sign, 0.0, 0.0], (n, 1))
            else:
                pts = np.column_stack([u, np.full(n, sign * hy), z])
                normals = np.tile([0.0, sign, 0.0], (n, 1))
            return pts, normals

        return make_face(sampler, 2 * half * 2 * hz)

    def top(rng, n):
        pts = np.column_stack(
            [rng.uniform(-hx, hx, n), rng.uniform(-hy, hy, n), np.full(n, 2 * hz)]
        )
        return pts, np.tile([0.0, 0.0, 1.0], (n, 1))

    return [
        side(0, 1.0),
        side(0, -1.0),
        side(1, 1.0),
        side(1, -1.0),
        make_face(top, 2 * hx * 2 * hy),
    ]


def _pole_surface(center_xy, radius, height) -> _Surface:
    cx, cy = center_xy

    def sample(rng: np.random.Generator, n: int):
        theta = rng.uniform(0.0, 2 * math.pi, n)
        z = rng.uniform(0.0, height, n)
        nx, ny = np.cos(theta), np.sin(theta)
        pts = np.column_stack([cx + radius * nx, cy + radius * ny, z])
        normals = np.column_stack([nx, ny, np.zeros(n)])
        return pts, normals

    return _Surface(2 * math.pi * radius * height, sample)


def _wall_surface(start_xy, end_xy, height) -> _Surface:
    start = np.asarray(start_xy, dtype=np.float64)
    delta = np.asarray(end_xy, dtype=np.float64) - start
    length = float(np.hypot(*delta))
    normal = np.array([delta[1], -delta[0], 0.0]) / length

    def sample(rng: np.random.Generator, n: int):
        s = rng.uniform(0.0, 1.0, n)
        z = rng.uniform(0.0, height, n)
        xy = start + s[:, None] * delta
        pts = np.column_stack([xy, z])
        return pts, np.tile(normal, (n, 1))

    return _Surface(length * height, sample)


def _largest_remainder(weights: Sequence[float], total: int) -> list[int]:
    """Integer allocation of total by weight, exact and deterministic."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative with a positive sum")
    quota = w / w.sum() * total
    counts = np.floor(quota).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        # ties broken by index so the allocation never depends on dict order
        order = np.lexsort((np.arange(len(w)), -(quota - counts)))
        for i in order[:short]:
            counts[i] += 1
    return counts.tolist()


def generate_scene(spec: SceneSpec) -> WorldScene:
    """Sample the scene's surfaces in proportion to area, noise frozen in.

    Each point is displaced along its surface normal by a uniform offset
    in [-sigma, sigma] exactly once, at generation time. Frames rendered
    later see the same displaced world point, which keeps rendered flow
    rigid.
    """
    rng = np.random.default_rng(spec.seed)
    surfaces: list[_Surface] = []
    if spec.include_ground:
        surfaces.append(_ground_surface(spec.ground_extent))
    x0, x1, y0, y1 = spec.ground_extent
    for _ in range(spec.n_boxes):
        hx = rng.uniform(*spec.box_side) / 2
        hy = rng.uniform(*spec.box_side) / 2
        hz = rng.uniform(*spec.box_height) / 2
        center = (rng.uniform(x0 + hx, x1 - hx), rng.uniform(y0 + hy, y1 - hy))
        surfaces.extend(_box_face_surfaces(center, hx, hy, hz, rng.uniform(*spec.box_yaw)))
    for _ in range(spec.n_poles):
        radius = rng.uniform(*spec.pole_radius)
        center = (rng.uniform(x0, x1), rng.uniform(y0, y1))
        surfaces.append(_pole_surface(center, radius, rng.uniform(*spec.pole_height)))
    for _ in range(spec.n_walls):
        length = rng.uniform(*spec.wall_length)
        side = 1.0 if rng.integers(0, 2) else -1.0
        offset = side * rng.uniform(*spec.wall_offset)
        xs = rng.uniform(x0, max(x0, x1 - length))
        surfaces.append(_wall_surface((xs, offset), (xs + length, offset), rng.uniform(*spec.wall_height)))
    if not surfaces:
        raise ValueError("empty scene")

    counts = _largest_remainder([s.area for s in surfaces], spec.n_points)
    chunks = []
    ground_flags = []
    for surf, n in zip(surfaces, counts):
        if n == 0:
            continue
        pts, normals = surf.sampler(rng, n)
        offsets = rng.uniform(-spec.noise_sigma_m, spec.noise_sigma_m, n)
        chunks.append(pts + offsets[:, None] * normals)
        ground_flags.append(np.full(n, surf.is_ground))
    points = np.concatenate(chunks, axis=0)
    return WorldScene(points, np.concatenate(ground_flags))


@dataclass(frozen=True)
class DynamicObject:
    """A box translating at constant world velocity, sampled once at t = 0."""

    box: BoundingBox
    velocity: np.ndarray
    n_points: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        v = np.asarray(self.velocity, dtype=np.float64).reshape(3).copy()
        v.flags.writeable = False
        object.__setattr__(self, "velocity", v)
        if self.n_points < 1:
            raise ValueError("dynamic objects need at least one point")

    def points_at(self, t: float) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        hx, hy, hz = self.box.half_extents
        base = self.box.center - [0.0, 0.0, hz]  # sits on its bottom face
        faces = _box_face_surfaces((0.0, 0.0), hx, hy, hz, self.box.yaw_deg)
        counts = _largest_remainder([f.area for f in faces], self.n_points)
        chunks = [f.sampler(rng, n)[0] for f, n in zip(faces, counts) if n > 0]
        pts = np.concatenate(chunks, axis=0) + base
        return pts + t * self.velocity

    def box_at(self, t: float) -> BoundingBox:
        return BoundingBox(self.box.center + t * self.velocity, self.box.half_extents, self.box.yaw_deg)


def render_sequence(
    world: WorldScene,
    traj: TrajectorySpec,
    error: RotationError,
    sensor_range_m: float = 60.0,
    frame_budget: int = 4096,
    seed: int = 0,
    dynamic_objects: Sequence[DynamicObject] = (),
) -> FrameSequence:
    """Observe the world along the trajectory through a miscalibrated mount.

    Per frame: world points within sensor range of the ego position are
    expressed in the true sensor frame (the nominal mount is identity,
    so that frame coincides with the vehicle frame), then the mount
    error rotates them, then an over-budget frame is subsampled
    deterministically. point_ids keeps each point's world index, sorted
    ascending, so consecutive frames can be matched exactly in tests.
    """
    if len(world) == 0:
        raise ValueError("empty input")
    if not (sensor_range_m > 0):
        raise ValueError(f"sensor range must be positive, got {sensor_range_m}")
    if frame_budget < 1:
        raise ValueError(f"frame budget must be positive, got {frame_budget}")
    times, poses = traj.poses()
    n_world = len(world)
    clouds = []
    ids_per_frame = []
    boxes_per_frame = []
    for k, (t, pose) in enumerate(zip(times, poses)):
        pts = world.points
        ids = np.arange(n_world)
        if dynamic_objects:
            dyn_pts = np.concatenate([obj.points_at(t) for obj in dynamic_objects], axis=0)
            pts = np.concatenate([pts, dyn_pts], axis=0)
            ids = np.concatenate([ids, np.arange(len(dyn_pts)) + n_world])
        dist = np.linalg.norm(pts - pose.translation, axis=1)
        in_range = dist <= sensor_range_m
        ids = ids[in_range]
        if ids.size == 0:
            raise ValueError(f"empty frame at index {k}")
        if ids.size > frame_budget:
            frame_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(k,)))
            keep = frame_rng.choice(ids.size, size=frame_budget, replace=False)
            ids = ids[np.sort(keep)]
        ids = np.sort(ids)
        vehicle_pts = pose.inverse().apply(pts[ids])
        sensor_pts = error.as_rotation().apply(vehicle_pts)
        clouds.append(PointCloud(sensor_pts, ReferenceFrame.SENSOR, t))
        ids_per_frame.append(ids)
        inv = pose.inverse()
        boxes_per_frame.append(
            tuple(
                BoundingBox(
                    inv.apply(obj.box_at(t).center.reshape(1, 3))[0],
                    obj.box.half_extents,
                    obj.box.yaw_deg - math.degrees(math.atan2(pose.rotation.matrix[1, 0], pose.rotation.matrix[0, 0])),
                )
                for obj in dynamic_objects
            )
        )
    return FrameSequence(
        tuple(clouds),
        poses,
        traj.rate_hz,
        point_ids=tuple(ids_per_frame),
        boxes=tuple(boxes_per_frame) if dynamic_objects else None,
    )


@dataclass(frozen=True)
class SamplePlan:
    """Everything needed to materialize one sample, fixed at planning time."""

    index: int
    error: RotationError
    bucket: SeverityBucket
    combination: str | None
    scene_seed: int
    trajectory: TrajectorySpec
    render_seed: int


@dataclass(frozen=True)
class LabeledSample:
    plan: SamplePlan
    sequence: FrameSequence

    @property
    def error(self) -> RotationError:
        return self.plan.error

    @property
    def bucket(self) -> SeverityBucket:
        return self.plan.bucket


@dataclass(frozen=True)
class DatasetConfig:
    """Dataset-level knobs; per-sample randomness derives from the seed tree."""

    n_samples: int = 2000
    aligned_fraction: float = 0.5
    seed: int = 0
    combination_mix: Mapping[str, float] | None = None
    severity_counts: Mapping[SeverityBucket, int] | None = None
    scene: SceneSpec = field(default_factory=SceneSpec)
    sensor_range_m: float = 60.0
    frame_budget: int = 4096
    speed_mps: float = 10.0
    duration_s: float = 1.0
    rate_hz: float = 10.0
    trajectory_weights: tuple[float, float, float] = (0.4, 0.4, 0.2)
    curvature_range: tuple[float, float] = (0.02, 0.08)
    n_dynamic_objects: int = 0

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if not (0.0 <= self.aligned_fraction <= 1.0):
            raise ValueError(f"aligned fraction must be in [0, 1], got {self.aligned_fraction}")
        if self.n_dynamic_objects < 0:
            raise ValueError("n_dynamic_objects must be nonnegative")


def _combination_counts(config: DatasetConfig, n_misaligned: int) -> dict[str, int]:
    mix = config.combination_mix
    if mix is None:
        mix = {key: 1.0 for key in COMBINATION_KEYS}
    unknown = sorted(set(mix) - set(COMBINATION_KEYS))
    if unknown:
        raise ValueError(f"unknown combinations in mix: {', '.join(unknown)}")
    if any(v < 0 for v in mix.values()) or sum(mix.values()) <= 0:
        raise ValueError("combination mix must be nonnegative with a positive sum")
    keys = [k for k in COMBINATION_KEYS if mix.get(k, 0.0) > 0]
    counts = _largest_remainder([mix[k] for k in keys], n_misaligned)
    return dict(zip(keys, counts))


def _severity_targets(config: DatasetConfig, n_misaligned: int) -> list[SeverityBucket] | None:
    wanted = config.severity_counts
    if wanted is None:
        return None
    buckets = (SeverityBucket.EASY, SeverityBucket.MEDIUM, SeverityBucket.HARD)
    unknown = sorted(set(wanted) - set(buckets), key=int)
    if unknown:
        raise ValueError(f"severity counts may only name misaligned buckets, got {unknown}")
    total = sum(int(wanted.get(b, 0)) for b in buckets)
    if total != n_misaligned:
        raise ValueError(f"severity counts sum to {total}, need {n_misaligned} misaligned samples")
    # deal by largest remaining fraction so severities interleave across
    # combinations instead of clumping into the first ones
    remaining = {b: int(wanted.get(b, 0)) for b in buckets}
    quota = {b: max(1, remaining[b]) for b in buckets}
    out = []
    for _ in range(n_misaligned):
        pick = max(buckets, key=lambda b: (remaining[b] / quota[b], remaining[b], -int(b)))
        remaining[pick] -= 1
        out.append(pick)
    return out


def _draw_error(config: DatasetConfig, index: int, combination: str, target: SeverityBucket | None) -> RotationError:
    axes = combination_axes(combination)
    if target is None:
        return sample_error(child_seed(config.seed, index, SEED_PURPOSE_ERROR), axes)
    for attempt in range(MAX_BUCKET_DRAWS):
        err = sample_error(child_seed(config.seed, index, SEED_PURPOSE_ERROR, attempt), axes)
        if classify_severity(err) == target:
            return err
    raise ValueError(f"could not draw a {target.name} error for combination {combination!r}")


def _plan_trajectory(config: DatasetConfig, index: int) -> TrajectorySpec:
    rng = np.random.default_rng(child_seed(config.seed, index, SEED_PURPOSE_TRAJECTORY))
    weights = np.asarray(config.trajectory_weights, dtype=np.float64)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("trajectory weights must be nonnegative with a positive sum")
    kind = TRAJECTORY_KINDS[rng.choice(len(TRAJECTORY_KINDS), p=weights / weights.sum())]
    curvature = 0.0
    if kind == "arc":
        sign = 1.0 if rng.integers(0, 2) else -1.0
        curvature = sign * rng.uniform(*config.curvature_range)
    return TrajectorySpec(
        kind=kind,
        speed_mps=config.speed_mps,
        duration_s=config.duration_s,
        rate_hz=config.rate_hz,
        curvature=curvature,
    )


def plan_dataset(config: DatasetConfig = DatasetConfig()) -> list[SamplePlan]:
    """Fix labels, seeds and trajectories for every sample, without rendering.

    Aligned samples come first in index order, then misaligned samples
    grouped by axis combination; severity targets, when requested, are
    interleaved so each combination receives its proportional share.
    """
    n_aligned = int(round(config.n_samples * config.aligned_fraction))
    n_misaligned = config.n_samples - n_aligned
    combo_counts = _combination_counts(config, n_misaligned)
    targets = _severity_targets(config, n_misaligned)

    assignments: list[tuple[str | None, SeverityBucket | None]] = [(None, None)] * n_aligned
    slot = 0
    for key in COMBINATION_KEYS:
        for _ in range(combo_counts.get(key, 0)):
            assignments.append((key, targets[slot] if targets else None))
            slot += 1

    plans = []
    for index, (combination, target) in enumerate(assignments):
        if combination is None:
            err = RotationError(0.0, 0.0, 0.0)
        else:
            err = _draw_error(config, index, combination, target)
        plans.append(
            SamplePlan(
                index=index,
                error=err,
                bucket=classify_severity(err),
                combination=combination,
                scene_seed=child_seed(config.seed, index, SEED_PURPOSE_SCENE),
                trajectory=_plan_trajectory(config, index),
                render_seed=child_seed(config.seed, index, SEED_PURPOSE_RENDER),
            )
        )
    return plans


def build_sample(plan: SamplePlan, config: DatasetConfig = DatasetConfig()) -> LabeledSample:
    """Materialize one planned sample; independent of all other samples."""
    scene = generate_scene(replace(config.scene, seed=plan.scene_seed))
    dynamic = tuple(
        _plan_dynamic_object(config, plan, j) for j in range(config.n_dynamic_objects)
    )
    sequence = render_sequence(
        scene,
        plan.trajectory,
        plan.error,
        sensor_range_m=config.sensor_range_m,
        frame_budget=config.frame_budget,
        seed=plan.render_seed,
        dynamic_objects=dynamic,
    )
    return LabeledSample(plan=plan, sequence=sequence)


def _plan_dynamic_object(config: DatasetConfig, plan: SamplePlan, j: int) -> DynamicObject:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=plan.render_seed, spawn_key=(1, j)))
    x0, x1, y0, y1 = config.scene.ground_extent
    half = np.array([rng.uniform(0.6, 1.2), rng.uniform(0.4, 0.9), rng.uniform(0.5, 0.9)])
    center = np.array([rng.uniform(x0 + 2, x1 - 2), rng.uniform(y0 + 2, y1 - 2), half[2]])
    speed = rng.uniform(2.0, 8.0)
    heading = rng.uniform(0.0, 2 * math.pi)
    velocity = np.array([speed * math.cos(heading), speed * math.sin(heading), 0.0])
    return DynamicObject(
        box=BoundingBox(center, half, rng.uniform(0.0, 360.0)),
        velocity=velocity,
        n_points=200,
        seed=int(rng.integers(0, 2**63)),
    )


def build_dataset(config: DatasetConfig = DatasetConfig()) -> list[LabeledSample]:
    """Plan and render the full dataset in memory, in index order."""
    return [build_sample(plan, config) for plan in plan_dataset(config)]
