"""Bit-exact on-disk formats: clouds, flows, manifests, datasets, checkpoints.

Binary layouts (all little-endian, float32 payloads):

cloud file      magic "FCPC", version u16, frame tag u8 (0 sensor,
                1 vehicle), count u32, then count x 3 float32 (x, y, z
                in meters). File size is exactly 11 + 12 * count bytes.
flow file       magic "FCFL", version u16, count u32, then count x 6
                float32 (anchor xyz, vector xyz).
checkpoint      magic "FCKP", version u16, histogram bin count u32, the
                32-byte digest of the geometric feature layout, a named
                tensor block (count u32, then per tensor: name length
                u16, name bytes, rows u32, cols u32, float32 row-major
                values), an optimizer flag u8 and, when set, step u64,
                five f64 hyperparameters (lr, weight decay, beta1,
                beta2, eps) and two more named tensor blocks for the
                first and second moments.

Manifests, dataset indexes and run configuration are JSON with sorted
keys and a trailing newline, so equal content means equal bytes. A
sample manifest records the frame file names and timestamps, the
vehicle poses (translation plus unit quaternion in wxyz order), the
injected rotation error, per-frame dynamic boxes, the capture rate and
the seeds that produced the sample.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .autodiff import OptimState
from .detector import DetectorModel
from .features import layout_hash
from .geometry import (
    PointCloud,
    ReferenceFrame,
    RigidTransform,
    RotationError,
    quat_wxyz_to_rotation,
    rotation_to_quat_wxyz,
)
from .preprocess import BoundingBox, FrameSequence
from .sceneflow import FlowField
from .synthgen import LabeledSample

CLOUD_MAGIC = b"FCPC"
FLOW_MAGIC = b"FCFL"
CHECKPOINT_MAGIC = b"FCKP"
CLOUD_VERSION = 1
FLOW_VERSION = 1
CHECKPOINT_VERSION = 1

_FRAME_TAGS = {ReferenceFrame.SENSOR: 0, ReferenceFrame.VEHICLE: 1}
_TAG_FRAMES = {v: k for k, v in _FRAME_TAGS.items()}


class DataIOError(Exception):
    """Base for all format errors raised by this module."""


class BadMagicError(DataIOError):
    pass


class VersionMismatchError(DataIOError):
    pass


class TruncatedPayloadError(DataIOError):
    pass


class SchemaError(DataIOError):
    pass


class LayoutMismatchError(DataIOError):
    pass


class MissingFrameError(DataIOError):
    pass


def _read_exact(data: bytes, offset: int, size: int, what: str) -> tuple[bytes, int]:
    if offset + size > len(data):
        raise TruncatedPayloadError(
            f"truncated payload: needed {size} bytes for {what} at byte {offset}, file has {len(data)}"
        )
    return data[offset : offset + size], offset + size


def _check_magic(data: bytes, magic: bytes, path: Path) -> None:
    got, _ = _read_exact(data, 0, 4, "magic")
    if got != magic:
        raise BadMagicError(f"{path}: bad magic {got!r}, expected {magic!r}")


def _check_version(version: int, expected: int, path: Path) -> None:
    if version != expected:
        raise VersionMismatchError(f"{path}: version {version} not supported, expected {expected}")


def write_cloud(path: str | Path, cloud: PointCloud) -> None:
    pts = cloud.points.astype("<f4")
    blob = CLOUD_MAGIC + struct.pack(
        "<HBI", CLOUD_VERSION, _FRAME_TAGS[cloud.frame], len(cloud)
    ) + pts.tobytes()
    Path(path).write_bytes(blob)


def read_cloud(path: str | Path, timestamp: float = 0.0) -> PointCloud:
    path = Path(path)
    data = path.read_bytes()
    _check_magic(data, CLOUD_MAGIC, path)
    header, offset = _read_exact(data, 4, 7, "header")
    version, tag, count = struct.unpack("<HBI", header)
    _check_version(version, CLOUD_VERSION, path)
    if tag not in _TAG_FRAMES:
        raise SchemaError(f"{path}: unknown frame tag {tag}")
    payload, offset = _read_exact(data, offset, 12 * count, f"{count} points")
    if offset != len(data):
        raise SchemaError(f"{path}: {len(data) - offset} trailing bytes after {count} points")
    pts = np.frombuffer(payload, dtype="<f4").reshape(count, 3).astype(np.float64)
    return PointCloud(pts, _TAG_FRAMES[tag], timestamp)


def write_flows(path: str | Path, flows: FlowField) -> None:
    payload = np.concatenate([flows.anchors, flows.vectors], axis=1).astype("<f4")
    blob = FLOW_MAGIC + struct.pack("<HI", FLOW_VERSION, len(flows)) + payload.tobytes()
    Path(path).write_bytes(blob)


def read_flows(path: str | Path) -> FlowField:
    path = Path(path)
    data = path.read_bytes()
    _check_magic(data, FLOW_MAGIC, path)
    header, offset = _read_exact(data, 4, 6, "header")
    version, count = struct.unpack("<HI", header)
    _check_version(version, FLOW_VERSION, path)
    payload, offset = _read_exact(data, offset, 24 * count, f"{count} flow rows")
    if offset != len(data):
        raise SchemaError(f"{path}: {len(data) - offset} trailing bytes after {count} rows")
    rows = np.frombuffer(payload, dtype="<f4").reshape(count, 6).astype(np.float64)
    return FlowField(rows[:, :3], rows[:, 3:])


def _dump_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _load_json(path: Path) -> dict:
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise SchemaError(f"{path}: top level must be an object")
    return payload


def _require(payload: Mapping, key: str, path: Path):
    if key not in payload:
        raise SchemaError(f"{path}: missing key {key!r}")
    return payload[key]


def _pose_to_json(pose: RigidTransform) -> dict:
    return {
        "translation": [float(v) for v in pose.translation],
        "quaternion_wxyz": [float(v) for v in rotation_to_quat_wxyz(pose.rotation)],
    }


def _pose_from_json(obj: Mapping, path: Path) -> RigidTransform:
    t = np.asarray(_require(obj, "translation", path), dtype=np.float64)
    q = np.asarray(_require(obj, "quaternion_wxyz", path), dtype=np.float64)
    if t.shape != (3,) or q.shape != (4,):
        raise SchemaError(f"{path}: pose needs a 3-vector translation and a 4-vector quaternion")
    try:
        rot = quat_wxyz_to_rotation(q)
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    return RigidTransform(rot, t)


def _box_to_json(box: BoundingBox) -> dict:
    return {
        "center": [float(v) for v in box.center],
        "half_extents": [float(v) for v in box.half_extents],
        "yaw_deg": float(box.yaw_deg),
    }


def _box_from_json(obj: Mapping, path: Path) -> BoundingBox:
    return BoundingBox(
        np.asarray(_require(obj, "center", path), dtype=np.float64),
        np.asarray(_require(obj, "half_extents", path), dtype=np.float64),
        float(_require(obj, "yaw_deg", path)),
    )


@dataclass(frozen=True)
class SampleManifest:
    """Everything needed to reload one sample from its directory."""

    sample_index: int
    rate_hz: float
    frame_files: tuple[str, ...]
    timestamps: tuple[float, ...]
    poses: tuple[RigidTransform, ...]
    error: RotationError
    seeds: Mapping[str, int] = field(default_factory=dict)
    boxes: tuple[tuple[BoundingBox, ...], ...] | None = None

    def __post_init__(self) -> None:
        if not (len(self.frame_files) == len(self.timestamps) == len(self.poses)):
            raise ValueError("frame_files, timestamps and poses must have equal length")
        if self.boxes is not None and len(self.boxes) != len(self.frame_files):
            raise ValueError("boxes must have one entry per frame")


def write_manifest(path: str | Path, manifest: SampleManifest) -> None:
    payload = {
        "version": 1,
        "sample_index": manifest.sample_index,
        "rate_hz": manifest.rate_hz,
        "frames": [
            {"file": f, "timestamp": t}
            for f, t in zip(manifest.frame_files, manifest.timestamps)
        ],
        "poses": [_pose_to_json(p) for p in manifest.poses],
        "error": {
            "roll_deg": manifest.error.roll,
            "pitch_deg": manifest.error.pitch,
            "yaw_deg": manifest.error.yaw,
        },
        "seeds": {k: int(v) for k, v in sorted(manifest.seeds.items())},
        "boxes": None
        if manifest.boxes is None
        else [[_box_to_json(b) for b in frame] for frame in manifest.boxes],
    }
    _dump_json(Path(path), payload)


def read_manifest(path: str | Path, check_files: bool = True) -> SampleManifest:
    path = Path(path)
    payload = _load_json(path)
    version = _require(payload, "version", path)
    if version != 1:
        raise VersionMismatchError(f"{path}: manifest version {version} not supported")
    frames = _require(payload, "frames", path)
    if not isinstance(frames, list) or not frames:
        raise SchemaError(f"{path}: frames must be a nonempty list")
    files = tuple(str(_require(f, "file", path)) for f in frames)
    times = tuple(float(_require(f, "timestamp", path)) for f in frames)
    if check_files:
        for name in files:
            frame_path = path.parent / name
            if not frame_path.is_file():
                raise MissingFrameError(f"missing frame file {frame_path}")
    poses = tuple(_pose_from_json(p, path) for p in _require(payload, "poses", path))
    err = _require(payload, "error", path)
    try:
        error = RotationError(
            float(_require(err, "roll_deg", path)),
            float(_require(err, "pitch_deg", path)),
            float(_require(err, "yaw_deg", path)),
        )
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    boxes_json = payload.get("boxes")
    boxes = (
        None
        if boxes_json is None
        else tuple(tuple(_box_from_json(b, path) for b in frame) for frame in boxes_json)
    )
    return SampleManifest(
        sample_index=int(_require(payload, "sample_index", path)),
        rate_hz=float(_require(payload, "rate_hz", path)),
        frame_files=files,
        timestamps=times,
        poses=poses,
        error=error,
        seeds={str(k): int(v) for k, v in _require(payload, "seeds", path).items()},
        boxes=boxes,
    )


def write_labeled_sample(sample_dir: str | Path, sample: LabeledSample) -> None:
    """Write one sample as manifest.json plus per-frame cloud files."""
    sample_dir = Path(sample_dir)
    sample_dir.mkdir(parents=True, exist_ok=True)
    seq = sample.sequence
    files = []
    for k, cloud in enumerate(seq.clouds):
        name = f"cloud_{k:03d}.fcpc"
        write_cloud(sample_dir / name, cloud)
        files.append(name)
    manifest = SampleManifest(
        sample_index=sample.plan.index,
        rate_hz=seq.rate_hz,
        frame_files=tuple(files),
        timestamps=tuple(c.timestamp for c in seq.clouds),
        poses=seq.poses,
        error=sample.error,
        seeds={
            "scene": sample.plan.scene_seed,
            "render": sample.plan.render_seed,
        },
        boxes=seq.boxes,
    )
    write_manifest(sample_dir / "manifest.json", manifest)


def read_labeled_sequence(sample_dir: str | Path) -> tuple[FrameSequence, RotationError, SampleManifest]:
    """Reload a sample directory into a FrameSequence plus its label."""
    sample_dir = Path(sample_dir)
    manifest = read_manifest(sample_dir / "manifest.json")
    clouds = tuple(
        read_cloud(sample_dir / name, timestamp=t)
        for name, t in zip(manifest.frame_files, manifest.timestamps)
    )
    seq = FrameSequence(clouds, manifest.poses, manifest.rate_hz, boxes=manifest.boxes)
    return seq, manifest.error, manifest


def write_dataset_index(path: str | Path, entries: Sequence[Mapping]) -> None:
    payload = {
        "version": 1,
        "n_samples": len(entries),
        "samples": [dict(e) for e in entries],
    }
    _dump_json(Path(path), payload)


def read_dataset_index(path: str | Path) -> list[dict]:
    path = Path(path)
    payload = _load_json(path)
    if _require(payload, "version", path) != 1:
        raise VersionMismatchError(f"{path}: index version not supported")
    samples = _require(payload, "samples", path)
    if not isinstance(samples, list):
        raise SchemaError(f"{path}: samples must be a list")
    if len(samples) != _require(payload, "n_samples", path):
        raise SchemaError(f"{path}: n_samples does not match the sample list")
    return [dict(s) for s in samples]


def _pack_tensor_block(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"tensor {name!r} must be 2D, got shape {a.shape}")
        encoded = name.encode()
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<II", a.shape[0], a.shape[1]))
        parts.append(a.astype("<f4").tobytes())
    return b"".join(parts)


def _unpack_tensor_block(data: bytes, offset: int, path: Path) -> tuple[dict[str, np.ndarray], int]:
    raw, offset = _read_exact(data, offset, 4, "tensor count")
    (count,) = struct.unpack("<I", raw)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        raw, offset = _read_exact(data, offset, 2, "tensor name length")
        (name_len,) = struct.unpack("<H", raw)
        raw, offset = _read_exact(data, offset, name_len, "tensor name")
        name = raw.decode()
        raw, offset = _read_exact(data, offset, 8, f"shape of {name!r}")
        rows, cols = struct.unpack("<II", raw)
        raw, offset = _read_exact(data, offset, 4 * rows * cols, f"values of {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(np.float64)
    return out, offset


def save_checkpoint(path: str | Path, model: DetectorModel, optim: OptimState | None = None) -> None:
    """Serialize the model (and optionally the optimizer) to one file.

    Values are written as float32; snap the model with quantize_float32
    first (training does this) if bitwise save/load identity matters.
    """
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<HI", CHECKPOINT_VERSION, model.n_bins),
        layout_hash(model.n_bins),
        _pack_tensor_block(model.named_arrays()),
    ]
    if optim is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<B", 1))
        parts.append(
            struct.pack(
                "<Qddddd",
                optim.step,
                optim.lr,
                optim.weight_decay,
                optim.beta1,
                optim.beta2,
                optim.eps,
            )
        )
        parts.append(_pack_tensor_block(optim.m))
        parts.append(_pack_tensor_block(optim.v))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path, model: DetectorModel) -> OptimState | None:
    """Load tensors into the model in place; returns the optimizer if saved."""
    path = Path(path)
    data = path.read_bytes()
    _check_magic(data, CHECKPOINT_MAGIC, path)
    raw, offset = _read_exact(data, 4, 6, "header")
    version, n_bins = struct.unpack("<HI", raw)
    _check_version(version, CHECKPOINT_VERSION, path)
    digest, offset = _read_exact(data, offset, 32, "layout hash")
    if n_bins != model.n_bins or digest != layout_hash(model.n_bins):
        raise LayoutMismatchError(
            f"{path}: feature layout mismatch (file has n_bins={n_bins}, model expects {model.n_bins})"
        )
    arrays, offset = _unpack_tensor_block(data, offset, path)
    try:
        model.load_arrays(arrays)
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    raw, offset = _read_exact(data, offset, 1, "optimizer flag")
    (has_optim,) = struct.unpack("<B", raw)
    if not has_optim:
        if offset != len(data):
            raise SchemaError(f"{path}: {len(data) - offset} trailing bytes")
        return None
    raw, offset = _read_exact(data, offset, 48, "optimizer header")
    step, lr, wd, beta1, beta2, eps = struct.unpack("<Qddddd", raw)
    m, offset = _unpack_tensor_block(data, offset, path)
    v, offset = _unpack_tensor_block(data, offset, path)
    if offset != len(data):
        raise SchemaError(f"{path}: {len(data) - offset} trailing bytes")
    return OptimState(
        lr=lr, weight_decay=wd, beta1=beta1, beta2=beta2, eps=eps, step=step, m=m, v=v
    )


def write_config(path: str | Path, config: Mapping) -> None:
    _dump_json(Path(path), dict(config))


def read_config(path: str | Path) -> dict:
    return _load_json(Path(path))
