"""Core 3D types: point clouds, rotations, rigid transforms, and mount faults.

Conventions used throughout the package:

* Points are column vectors conceptually; arrays store one point per row
  and rotations act as ``p' = R @ p``.
* Euler angles are given in degrees as (roll, pitch, yaw) about the body
  x, y, z axes. The default composition order "zyx" means the matrix is
  ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
* A mount fault is a rotation applied to every point of a sensor-frame
  cloud, as if the sensor were bolted on slightly rotated.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

ORTHONORMAL_TOL = 1e-9

# Injected per-axis angles are drawn from +-[MIN_FAULT_DEG, MAX_FAULT_DEG].
MIN_FAULT_DEG = 0.5
MAX_FAULT_DEG = 5.0


class ReferenceFrame(enum.Enum):
    """Which frame a cloud's coordinates live in."""

    SENSOR = "sensor"
    VEHICLE = "vehicle"


class SeverityBucket(enum.IntEnum):
    """Fault severity by largest per-axis angle, ordered easy > medium > hard."""

    ALIGNED = 0
    HARD = 1
    MEDIUM = 2
    EASY = 3


class Point3(NamedTuple):
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


def _as_points_array(points: np.ndarray | Sequence, what: str) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{what} must have shape (N, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite coordinates")
    return arr


@dataclass(frozen=True)
class PointCloud:
    """Ordered set of 3D points with a frame tag and a timestamp.

    Construction is permissive about emptiness (an empty cloud is a valid
    value, e.g. when read back from disk); operations that need points
    raise on empty input instead.
    """

    points: np.ndarray
    frame: ReferenceFrame
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        arr = _as_points_array(self.points, "points")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "points", arr)
        if not isinstance(self.frame, ReferenceFrame):
            raise ValueError(f"frame must be a ReferenceFrame, got {self.frame!r}")
        if not math.isfinite(self.timestamp) or self.timestamp < 0.0:
            raise ValueError(f"timestamp must be finite and >= 0, got {self.timestamp}")

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> PointCloud:
        return PointCloud(points, self.frame, self.timestamp)


@dataclass(frozen=True)
class Rotation3:
    """Proper rotation matrix, validated orthonormal with determinant +1."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("rotation matrix contains non-finite entries")
        if not np.allclose(m @ m.T, np.eye(3), atol=ORTHONORMAL_TOL, rtol=0.0):
            raise ValueError("rotation matrix is not orthonormal")
        if not math.isclose(float(np.linalg.det(m)), 1.0, abs_tol=1e-9):
            raise ValueError("rotation matrix determinant is not +1")
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @staticmethod
    def identity() -> Rotation3:
        return Rotation3(np.eye(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Rotate one (3,) point or an (N, 3) array of points."""
        arr = np.asarray(points, dtype=np.float64)
        if arr.ndim == 1:
            return self.matrix @ arr
        return arr @ self.matrix.T

    def inverse(self) -> Rotation3:
        return Rotation3(self.matrix.T)

    def __matmul__(self, other: Rotation3) -> Rotation3:
        return Rotation3(self.matrix @ other.matrix)

    def angle_to(self, other: Rotation3) -> float:
        """Geodesic angle in degrees between two rotations."""
        rel = self.matrix.T @ other.matrix
        c = (np.trace(rel) - 1.0) / 2.0
        return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def _axis_rotation(axis: str, angle_deg: float) -> np.ndarray:
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    if axis == "x":
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis == "y":
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    if axis == "z":
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    raise ValueError(f"unknown axis {axis!r}")


def rotation_from_euler(
    roll_deg: float, pitch_deg: float, yaw_deg: float, order: str = "zyx"
) -> Rotation3:
    """Build a rotation from per-axis angles in degrees.

    ``order`` names the left-to-right factor sequence; the default "zyx"
    yields ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``, i.e. roll is applied first
    to a column vector.
    """
    for angle, name in ((roll_deg, "roll"), (pitch_deg, "pitch"), (yaw_deg, "yaw")):
        if not math.isfinite(angle):
            raise ValueError(f"{name} angle must be finite, got {angle}")
    if sorted(order) != ["x", "y", "z"]:
        raise ValueError(f"order must be a permutation of 'xyz', got {order!r}")
    by_axis = {"x": roll_deg, "y": pitch_deg, "z": yaw_deg}
    m = np.eye(3)
    for axis in order:
        m = m @ _axis_rotation(axis, by_axis[axis])
    return Rotation3(m)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation plus translation; maps ``p' = R @ p + t``."""

    rotation: Rotation3
    translation: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation contains non-finite entries")
        t = t.copy()
        t.flags.writeable = False
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> RigidTransform:
        return RigidTransform(Rotation3.identity(), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.rotation.apply(points) + self.translation

    def inverse(self) -> RigidTransform:
        rinv = self.rotation.inverse()
        return RigidTransform(rinv, -rinv.apply(self.translation))

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        # (self @ other).apply(p) == self.apply(other.apply(p))
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation.apply(other.translation) + self.translation,
        )


def rotation_to_quat_wxyz(rot: Rotation3) -> np.ndarray:
    """Unit quaternion (w, x, y, z) for a rotation, w >= 0."""
    m = rot.matrix
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(m)))
        if i == 0:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            q = np.array(
                [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
            )
        elif i == 1:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            q = np.array(
                [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
            )
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            q = np.array(
                [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
            )
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_wxyz_to_rotation(q: np.ndarray, unit_tol: float = 1e-6) -> Rotation3:
    """Rotation for a quaternion (w, x, y, z); the norm must be 1 within unit_tol."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = float(np.linalg.norm(q))
    if abs(n - 1.0) > unit_tol:
        raise ValueError(f"quaternion norm {n} is not unit within {unit_tol}")
    w, x, y, z = q / n
    m = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
    return Rotation3(m)


_AXIS_NAMES = ("roll", "pitch", "yaw")


@dataclass(frozen=True)
class RotationError:
    """Per-axis mount fault in degrees with per-axis active flags.

    An active axis carries an angle with MIN_FAULT_DEG <= |angle| <=
    MAX_FAULT_DEG; an inactive axis carries exactly 0. The all-inactive
    value is the aligned (no fault) case.
    """

    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0
    active: tuple[bool, bool, bool] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        angles = (self.roll, self.pitch, self.yaw)
        active = self.active
        if active is None:
            active = tuple(a != 0.0 for a in angles)
        active = tuple(bool(f) for f in active)
        if len(active) != 3:
            raise ValueError("active must have three flags")
        for angle, flag, name in zip(angles, active, _AXIS_NAMES):
            if not math.isfinite(angle):
                raise ValueError(f"{name} angle must be finite")
            if flag:
                if not (MIN_FAULT_DEG <= abs(angle) <= MAX_FAULT_DEG):
                    raise ValueError(
                        f"active {name} angle {angle} outside "
                        f"[{MIN_FAULT_DEG}, {MAX_FAULT_DEG}] in magnitude"
                    )
            elif angle != 0.0:
                raise ValueError(f"inactive {name} angle must be 0, got {angle}")
        object.__setattr__(self, "active", active)

    @staticmethod
    def aligned() -> RotationError:
        return RotationError(0.0, 0.0, 0.0)

    @property
    def angles(self) -> tuple[float, float, float]:
        return (self.roll, self.pitch, self.yaw)

    @property
    def is_misaligned(self) -> bool:
        return any(self.active)

    @property
    def max_abs_angle(self) -> float:
        return max(abs(a) for a in self.angles)

    def negated(self) -> RotationError:
        return RotationError(-self.roll, -self.pitch, -self.yaw, self.active)

    def as_rotation(self, order: str = "zyx") -> Rotation3:
        return rotation_from_euler(self.roll, self.pitch, self.yaw, order)

    def combination_key(self) -> str:
        """Name of the active-axis combination, e.g. "roll+yaw"; "aligned" if none."""
        names = [n for n, f in zip(_AXIS_NAMES, self.active) if f]
        return "+".join(names) if names else "aligned"


def inject_rotation(cloud: PointCloud, error: RotationError) -> PointCloud:
    """Apply a mount fault to a sensor-frame cloud: every point is rotated.

    Mimics data seen through a sensor mounted with a small rotational
    offset. The cloud must be in the sensor frame; the result keeps the
    frame tag and timestamp.
    """
    if len(cloud) == 0:
        raise ValueError("empty input")
    if cloud.frame is not ReferenceFrame.SENSOR:
        raise ValueError(f"injection requires a sensor-frame cloud, got {cloud.frame}")
    rot = error.as_rotation()
    return cloud.with_points(rot.apply(cloud.points))


def sample_error(rng_seed: int, active_axes: tuple[bool, bool, bool]) -> RotationError:
    """Draw a fault with the given active axes, deterministic in rng_seed.

    Each active axis gets an independent sign (equal probability) and a
    magnitude uniform over [MIN_FAULT_DEG, MAX_FAULT_DEG]; inactive axes
    stay 0.
    """
    if len(active_axes) != 3:
        raise ValueError("active_axes must have three flags")
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    angles = []
    for flag in active_axes:
        if flag:
            sign = 1.0 if rng.integers(0, 2) == 1 else -1.0
            mag = rng.uniform(MIN_FAULT_DEG, MAX_FAULT_DEG)
            angles.append(sign * mag)
        else:
            angles.append(0.0)
    return RotationError(angles[0], angles[1], angles[2], tuple(bool(f) for f in active_axes))


def classify_severity(error: RotationError) -> SeverityBucket:
    """Bucket a fault by its largest per-axis magnitude.

    0 is aligned; (0, 1] degrees is hard; (1, 2] is medium; above 2 is
    easy. Boundary angles land in the harder (smaller-angle) bucket.
    """
    m = error.max_abs_angle
    if m == 0.0:
        return SeverityBucket.ALIGNED
    if m <= 1.0:
        return SeverityBucket.HARD
    if m <= 2.0:
        return SeverityBucket.MEDIUM
    return SeverityBucket.EASY


COMBINATION_KEYS = (
    "roll",
    "pitch",
    "yaw",
    "roll+pitch",
    "roll+yaw",
    "pitch+yaw",
    "roll+pitch+yaw",
)


def combination_axes(key: str) -> tuple[bool, bool, bool]:
    """Active-axis flags for a combination key such as "pitch+yaw"."""
    if key == "aligned":
        return (False, False, False)
    parts = key.split("+")
    if not parts or any(p not in _AXIS_NAMES for p in parts) or len(set(parts)) != len(parts):
        raise ValueError(f"unknown axis combination {key!r}")
    return tuple(n in parts for n in _AXIS_NAMES)  # type: ignore[return-value]
