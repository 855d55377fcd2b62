"""Command line pipeline: generate, flow, train, eval.

The four subcommands hand work to each other through one output
directory: generate writes the labeled dataset, flow adds per-pair flow
files next to each sample's frames, train writes checkpoint and split
files, eval writes the report. Every command copies the config it ran
with into the directory, and all per-sample randomness is derived from
(seed, sample index) alone, so a --jobs worker pool never changes any
output byte.

Exit codes: 0 success, 1 invalid input or config, 2 partial failure
(some samples failed, the rest completed), 3 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataio import (
    DataIOError,
    read_config,
    read_dataset_index,
    read_flows,
    read_labeled_sequence,
    read_manifest,
    load_checkpoint,
    save_checkpoint,
    write_config,
    write_dataset_index,
    write_flows,
    write_labeled_sample,
)
from .detector import DetectorModel, DetectorSample, TrainConfig, train_detector
from .evalreport import (
    EvalRecord,
    build_report,
    distribution_export,
    render_text,
    report_to_json,
)
from .features import DEFAULT_N_BINS, build_geometric_vector
from .geometry import Rotation3, SeverityBucket, classify_severity
from .preprocess import PreprocessConfig, preprocess_sequence
from .sceneflow import FlowField, FlowSolverConfig, estimate_flow, rotate_flow_oracle
from .synthgen import DatasetConfig, SceneSpec, build_sample, child_seed, plan_dataset

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_PARTIAL = 2
EXIT_INTERNAL = 3

# seed-tree purposes 0..3 are claimed by dataset generation
SEED_PURPOSE_PREPROCESS = 4
SEED_PURPOSE_FLOW = 5
SEED_PURPOSE_CAP = 6


class ConfigError(Exception):
    """Invalid run configuration or command input."""


def _build_section(cls, payload, where: str, nested: Mapping[str, Callable] | None = None):
    """Strict dataclass construction: unknown keys are named and rejected."""
    if not isinstance(payload, Mapping):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in payload:
        if key not in names:
            raise ConfigError(f"unknown config key {where}.{key}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in payload:
            continue
        value = payload[f.name]
        if nested and f.name in nested:
            value = nested[f.name](value, f"{where}.{f.name}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse_severity_counts(value, where: str) -> dict[SeverityBucket, int]:
    if not isinstance(value, Mapping):
        raise ConfigError(f"{where} must be an object")
    out = {}
    for name, count in value.items():
        try:
            bucket = SeverityBucket[str(name).upper()]
        except KeyError:
            raise ConfigError(f"{where}: unknown severity bucket {name!r}") from None
        out[bucket] = int(count)
    return out


def _parse_mapping(value, where: str) -> dict:
    if not isinstance(value, Mapping):
        raise ConfigError(f"{where} must be an object")
    return dict(value)


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings for one command, plus the raw payload to copy."""

    seed: int
    out_dir: str | None
    n_bins: int
    dataset: DatasetConfig
    preprocess: PreprocessConfig
    solver: FlowSolverConfig
    oracle_flows: bool
    max_vectors_per_pair: int
    train: TrainConfig
    raw: dict


_TOP_KEYS = ("seed", "out_dir", "features", "dataset", "preprocess", "flow", "train")
_FLOW_KEYS = ("solver", "oracle", "max_vectors_per_pair")


def load_run_config(
    config_path: str | None,
    seed_override: int | None = None,
    out_override: str | None = None,
) -> RunConfig:
    if config_path is None:
        payload = {}
    else:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            payload = read_config(path)
        except DataIOError as exc:
            raise ConfigError(str(exc)) from exc
    for key in payload:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown config key {key}")

    seed = seed_override if seed_override is not None else int(payload.get("seed", 0))
    out_dir = out_override if out_override is not None else payload.get("out_dir")

    features = payload.get("features", {})
    if not isinstance(features, Mapping):
        raise ConfigError("features must be an object")
    for key in features:
        if key != "n_bins":
            raise ConfigError(f"unknown config key features.{key}")
    n_bins = int(features.get("n_bins", DEFAULT_N_BINS))
    if n_bins < 1:
        raise ConfigError(f"features.n_bins must be positive, got {n_bins}")

    dataset_payload = payload.get("dataset", {})
    dataset = _build_section(
        DatasetConfig,
        dataset_payload,
        "dataset",
        nested={
            "scene": lambda v, w: _build_section(SceneSpec, v, w),
            "severity_counts": _parse_severity_counts,
            "combination_mix": _parse_mapping,
        },
    )
    if "seed" not in dataset_payload:
        dataset = replace(dataset, seed=seed)

    preprocess = _build_section(PreprocessConfig, payload.get("preprocess", {}), "preprocess")

    flow_payload = payload.get("flow", {})
    if not isinstance(flow_payload, Mapping):
        raise ConfigError("flow must be an object")
    for key in flow_payload:
        if key not in _FLOW_KEYS:
            raise ConfigError(f"unknown config key flow.{key}")
    solver = _build_section(FlowSolverConfig, flow_payload.get("solver", {}), "flow.solver")
    oracle_flows = bool(flow_payload.get("oracle", False))
    max_vectors = int(flow_payload.get("max_vectors_per_pair", 256))
    if max_vectors < 2:
        raise ConfigError(f"flow.max_vectors_per_pair must be >= 2, got {max_vectors}")

    train_payload = payload.get("train", {})
    train = _build_section(TrainConfig, train_payload, "train")
    if "seed" not in train_payload:
        train = replace(train, seed=seed)

    # the copied config records what shaped the artifacts; the resolved seed
    # does, the output location does not, so --out never lands in the copy
    raw = dict(payload)
    raw["seed"] = seed
    raw.pop("out_dir", None)
    return RunConfig(
        seed=seed,
        out_dir=None if out_dir is None else str(out_dir),
        n_bins=n_bins,
        dataset=dataset,
        preprocess=preprocess,
        solver=solver,
        oracle_flows=oracle_flows,
        max_vectors_per_pair=max_vectors,
        train=train,
        raw=raw,
    )


def _resolve_out(cfg: RunConfig) -> Path:
    if cfg.out_dir is None:
        raise ConfigError("output directory required (--out or out_dir in the config)")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _copy_config(cfg: RunConfig, out: Path, command: str) -> None:
    write_config(out / f"config_used_{command}.json", cfg.raw)


def _sample_dir_name(index: int) -> str:
    return f"sample_{index:04d}"


def cmd_generate(cfg: RunConfig, out: Path) -> int:
    try:
        plans = plan_dataset(cfg.dataset)
    except ValueError as exc:  # config-level contract violations
        raise ConfigError(str(exc)) from exc
    entries = []
    bucket_counts: dict[str, int] = {}
    for plan in plans:
        sample = build_sample(plan, cfg.dataset)
        write_labeled_sample(out / _sample_dir_name(plan.index), sample)
        entries.append(
            {
                "dir": _sample_dir_name(plan.index),
                "misaligned": plan.error.is_misaligned,
                "bucket": plan.bucket.name,
                "combination": plan.combination,
            }
        )
        bucket_counts[plan.bucket.name] = bucket_counts.get(plan.bucket.name, 0) + 1
    write_dataset_index(out / "index.json", entries)
    summary = "  ".join(f"{name}={bucket_counts.get(name, 0)}" for name in ("ALIGNED", "HARD", "MEDIUM", "EASY"))
    print(f"generated {len(entries)} samples  {summary}")
    return EXIT_OK


def _map_samples(tasks, jobs: int):
    """Run tasks (callables) preserving order; returns (results, failures)."""
    results = []
    failures = []
    if jobs <= 1:
        outcomes = [_guard(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_guard, tasks))
    for ok, value in outcomes:
        (results if ok else failures).append(value)
    return results, failures


def _guard(task):
    try:
        return True, task()
    except Exception as exc:  # per-sample isolation; the run continues
        return False, {"dir": getattr(task, "sample_dir", "?"), "error": f"{type(exc).__name__}: {exc}"}


def _flow_task(cfg: RunConfig, out: Path, index: int, entry: Mapping):
    def task():
        sample_dir = out / entry["dir"]
        seq, error, _manifest = read_labeled_sequence(sample_dir)
        pre = preprocess_sequence(
            seq,
            Rotation3.identity(),
            cfg.preprocess,
            rng_seed=child_seed(cfg.seed, index, SEED_PURPOSE_PREPROCESS),
        )
        pair_epe = []
        lateral = []
        for p in range(len(pre) - 1):
            source = pre.clouds[p]
            target = pre.clouds[p + 1]
            ego = pre.poses[p].inverse() @ pre.poses[p + 1]
            oracle = rotate_flow_oracle(source, ego, error)
            if cfg.oracle_flows:
                field = oracle
            else:
                field = estimate_flow(
                    source, target, cfg.solver,
                    rng_seed=child_seed(cfg.seed, index, SEED_PURPOSE_FLOW, p),
                )
            if len(field) > cfg.max_vectors_per_pair:
                rng = np.random.default_rng(child_seed(cfg.seed, index, SEED_PURPOSE_CAP, p))
                keep = np.sort(rng.choice(len(field), cfg.max_vectors_per_pair, replace=False))
                field = FlowField(field.anchors[keep], field.vectors[keep])
                oracle = FlowField(oracle.anchors[keep], oracle.vectors[keep])
            pair_epe.append(float(np.mean(np.linalg.norm(field.vectors - oracle.vectors, axis=1))))
            lateral.append(float(np.mean(np.abs(field.vectors[:, 1]))))
            write_flows(sample_dir / f"flow_{p:03d}.fcfl", field)
        return {
            "dir": entry["dir"],
            "pairs": len(pair_epe),
            "mean_epe": sum(pair_epe) / len(pair_epe),
            "lateral_mean": sum(lateral) / len(lateral),
        }

    task.sample_dir = entry["dir"]
    return task


def cmd_flow(cfg: RunConfig, out: Path, jobs: int) -> int:
    index_path = out / "index.json"
    if not index_path.is_file():
        raise ConfigError(f"no dataset index at {index_path}; run generate first")
    entries = read_dataset_index(index_path)
    tasks = [_flow_task(cfg, out, i, entry) for i, entry in enumerate(entries)]
    results, failures = _map_samples(tasks, jobs)
    log = {"samples": results, "failures": failures, "oracle": cfg.oracle_flows}
    write_config(out / "flow_log.json", log)
    for failure in failures:
        print(f"flow failed for {failure['dir']}: {failure['error']}", file=sys.stderr)
    if results:
        epe = sum(r["mean_epe"] for r in results) / len(results)
        print(f"flows for {len(results)}/{len(entries)} samples  mean EPE vs oracle {epe:.6f} m")
    return EXIT_PARTIAL if failures else EXIT_OK


def _load_detector_sample(cfg: RunConfig, sample_dir: Path) -> DetectorSample:
    manifest = read_manifest(sample_dir / "manifest.json", check_files=False)
    field = _load_combined_flows(sample_dir)
    error = manifest.error
    return DetectorSample(
        vectors=field.vectors,
        geometric=build_geometric_vector(field, cfg.n_bins),
        label_axes=error.active,
        label_global=error.is_misaligned,
        bucket=classify_severity(error),
    )


def _load_combined_flows(sample_dir: Path) -> FlowField:
    paths = sorted(sample_dir.glob("flow_*.fcfl"))
    if not paths:
        raise ConfigError(f"no flow files in {sample_dir}; run flow first")
    fields = [read_flows(p) for p in paths]
    return FlowField(
        np.concatenate([f.anchors for f in fields]),
        np.concatenate([f.vectors for f in fields]),
    )


def cmd_train(cfg: RunConfig, out: Path) -> int:
    index_path = out / "index.json"
    if not index_path.is_file():
        raise ConfigError(f"no dataset index at {index_path}; run generate first")
    entries = read_dataset_index(index_path)
    samples = [_load_detector_sample(cfg, out / e["dir"]) for e in entries]
    model = DetectorModel.create(cfg.train.seed, cfg.n_bins)
    try:
        result = train_detector(model, samples, cfg.train)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    save_checkpoint(out / "checkpoint.fckp", model)
    write_config(
        out / "splits.json",
        {
            "train": [entries[i]["dir"] for i in result.split.train],
            "val": [entries[i]["dir"] for i in result.split.val],
            "test": [entries[i]["dir"] for i in result.split.test],
        },
    )
    write_config(out / "training_log.json", {"epochs": result.history})
    last = result.history[-1] if result.history else {}
    acc = last.get("val_accuracy")
    suffix = "" if acc is None else f"  val accuracy {acc:.4f}"
    print(f"trained {cfg.train.epochs} epochs on {len(result.split.train)} samples{suffix}")
    return EXIT_OK


def _eval_task(cfg: RunConfig, out: Path, model: DetectorModel, sample_dir_name: str):
    def task():
        sample_dir = out / sample_dir_name
        manifest = read_manifest(sample_dir / "manifest.json", check_files=False)
        field = _load_combined_flows(sample_dir)
        verdict = model.predict(field, cfg.train.threshold)
        error = manifest.error
        record = EvalRecord(
            sample_id=manifest.sample_index,
            true_misaligned=error.is_misaligned,
            true_axes=error.active,
            verdict=verdict,
            error=error,
            bucket=classify_severity(error),
        )
        return record, field

    task.sample_dir = sample_dir_name
    return task


def cmd_eval(cfg: RunConfig, out: Path, jobs: int, as_json: bool) -> int:
    splits_path = out / "splits.json"
    if not splits_path.is_file():
        raise ConfigError(f"no split file at {splits_path}; run train first")
    splits = read_config(splits_path)
    test_dirs = splits.get("test", [])
    if not test_dirs:
        raise ConfigError("empty test split")
    model = DetectorModel.create(cfg.train.seed, cfg.n_bins)
    load_checkpoint(out / "checkpoint.fckp", model)

    tasks = [_eval_task(cfg, out, model, name) for name in test_dirs]
    results, failures = _map_samples(tasks, jobs)
    for failure in failures:
        print(f"eval failed for {failure['dir']}: {failure['error']}", file=sys.stderr)
    if not results:
        print("error: every test sample failed to evaluate", file=sys.stderr)
        return EXIT_PARTIAL

    results.sort(key=lambda pair: pair[0].sample_id)
    records = [r for r, _ in results]
    report = build_report(records)

    report_dir = out / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    text = render_text(report)
    (report_dir / "report.txt").write_text(text)
    payload = report_to_json(report)
    write_config(report_dir / "report.json", payload)
    populations = {}
    for record, field in results:
        tag = "misaligned" if record.true_misaligned else "aligned"
        populations.setdefault(tag, []).append(field)
    distribution_export(report_dir, populations, n_bins=cfg.n_bins)

    print(json.dumps(payload, sort_keys=True, indent=2) if as_json else text, end="")
    return EXIT_PARTIAL if failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="miscalib",
        description="Detect rotational LiDAR mounting faults from sequential point clouds.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="working directory for all pipeline files")

    p_gen = sub.add_parser("generate", help="synthesize the labeled dataset")
    add_common(p_gen)

    p_flow = sub.add_parser("flow", help="estimate per-pair scene flow for every sample")
    add_common(p_flow)
    p_flow.add_argument("--jobs", type=int, default=1, help="worker threads (never changes results)")
    p_flow.add_argument("--oracle", action="store_true", default=None,
                        help="use exact analytic flows instead of the solver")

    p_train = sub.add_parser("train", help="fit the detector on stored flows")
    add_common(p_train)

    p_eval = sub.add_parser("eval", help="score the test split and write the report")
    add_common(p_eval)
    p_eval.add_argument("--jobs", type=int, default=1, help="worker threads (never changes results)")
    p_eval.add_argument("--json", action="store_true", help="print the report as JSON")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.seed, args.out)
        if args.command == "flow" and args.oracle:
            raw = dict(cfg.raw)
            raw["flow"] = {**raw.get("flow", {}), "oracle": True}
            cfg = replace(cfg, oracle_flows=True, raw=raw)
        out = _resolve_out(cfg)
        _copy_config(cfg, out, args.command)
        if args.command == "generate":
            return cmd_generate(cfg, out)
        if args.command == "flow":
            return cmd_flow(cfg, out, args.jobs)
        if args.command == "train":
            return cmd_train(cfg, out)
        return cmd_eval(cfg, out, args.jobs, args.json)
    except (ConfigError, DataIOError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
