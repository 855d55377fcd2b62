"""Scene-flow based detection of LiDAR mounting-rotation faults.

The pipeline: synthesize labeled frame sequences (synthgen), clean and
distill them (preprocess), estimate per-pair scene flow (sceneflow),
summarize flows into geometric features (features), classify globally
and per rotation axis (detector), and report accuracy tables
(evalreport). The cli module chains these into reproducible runs with
file handoff (dataio).
"""

from .dataio import (
    DataIOError,
    load_checkpoint,
    read_cloud,
    read_flows,
    read_labeled_sequence,
    save_checkpoint,
    write_cloud,
    write_flows,
    write_labeled_sample,
)
from .detector import (
    DetectorModel,
    DetectorSample,
    TrainConfig,
    Verdict,
    stratified_split,
    train_detector,
)
from .evalreport import (
    EvalRecord,
    Report,
    build_report,
    distribution_export,
    render_text,
    report_to_json,
)
from .features import (
    DEFAULT_N_BINS,
    GeometricFeatureVector,
    build_geometric_vector,
    geometric_feature_dim,
    layout_hash,
)
from .geometry import (
    COMBINATION_KEYS,
    PointCloud,
    ReferenceFrame,
    RigidTransform,
    Rotation3,
    RotationError,
    SeverityBucket,
    classify_severity,
)
from .preprocess import (
    BoundingBox,
    FrameSequence,
    PreprocessConfig,
    distill_frames,
    preprocess_sequence,
    remove_dynamic,
    remove_ground,
    to_vehicle_frame,
)
from .sceneflow import (
    FlowField,
    FlowSolverConfig,
    chain_flows,
    estimate_flow,
    rotate_flow_oracle,
)
from .synthgen import (
    DatasetConfig,
    LabeledSample,
    SceneSpec,
    build_dataset,
    build_sample,
    plan_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "COMBINATION_KEYS",
    "DEFAULT_N_BINS",
    "DataIOError",
    "DatasetConfig",
    "DetectorModel",
    "DetectorSample",
    "EvalRecord",
    "FlowField",
    "FlowSolverConfig",
    "FrameSequence",
    "GeometricFeatureVector",
    "LabeledSample",
    "PointCloud",
    "PreprocessConfig",
    "ReferenceFrame",
    "Report",
    "RigidTransform",
    "Rotation3",
    "RotationError",
    "SceneSpec",
    "SeverityBucket",
    "TrainConfig",
    "Verdict",
    "build_dataset",
    "build_geometric_vector",
    "build_report",
    "build_sample",
    "chain_flows",
    "classify_severity",
    "distill_frames",
    "distribution_export",
    "estimate_flow",
    "geometric_feature_dim",
    "layout_hash",
    "load_checkpoint",
    "plan_dataset",
    "preprocess_sequence",
    "read_cloud",
    "read_flows",
    "read_labeled_sequence",
    "remove_dynamic",
    "remove_ground",
    "render_text",
    "report_to_json",
    "rotate_flow_oracle",
    "save_checkpoint",
    "stratified_split",
    "to_vehicle_frame",
    "train_detector",
    "write_cloud",
    "write_flows",
    "write_labeled_sample",
]
