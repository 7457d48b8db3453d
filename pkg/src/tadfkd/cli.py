"""Command-line entry point: ``tadfkd {train-teacher|distill|ablate|report}``.

Exit codes: 0 success, 2 usage or bad config, 3 IO failure, 4 experiment failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import make_dataset
from .distill import TrainConfig, run_distillation, train_teacher
from .errors import ChecksumMismatch, InvalidSpec, KTooLarge, SchemaVersionMismatch, TadfkdError
from .metrics import RunRecord, acc_last_k, acc_max, write_report
from .nn import load_network_with_meta, save_network

log = logging.getLogger("tadfkd")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FAILED = 0, 2, 3, 4
SCHEMA_VERSION = 1

ARMS = {
    "ta-dfkd": {"alpha": 0.0, "selection_enabled": True},
    "no-cls": {"alpha": 0.0, "selection_enabled": False},
    "baseline": {"alpha": 1.0, "selection_enabled": False},
    "cls-only": {"alpha": 1.0, "beta": 0.0, "gamma": 0.0, "selection_enabled": False},
    "adv-only": {"alpha": 0.0, "gamma": 0.0, "selection_enabled": False},
}

DEFAULT_DATASET = {"kind": "grid", "classes": 4, "per_class": 400, "grid": [8, 8], "noise": 2.5, "seed": 0}
DEFAULT_TEACHER = {
    "epochs": 40,
    "lr": 0.05,
    "seed": 0,
    "hidden": [128, 128, 64],
    "batch": 64,
    "schedule": "cosine",
    "snapshot_epochs": [20, 30, 40],
    "accuracy_floor": 0.0,
}
_TOP_KEYS = {"schema_version", "dataset", "teacher", "arms", "seeds", "k", "train", "out"}


class UsageError(Exception):
    pass


@dataclass
class ExperimentSpec:
    dataset: dict = field(default_factory=lambda: dict(DEFAULT_DATASET))
    teacher: dict = field(default_factory=lambda: dict(DEFAULT_TEACHER))
    arms: list = field(default_factory=lambda: ["ta-dfkd", "no-cls", "baseline"])
    seeds: list = field(default_factory=lambda: [1, 2, 3])
    k: int = 10
    train: dict = field(default_factory=dict)
    out: Optional[str] = None

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentSpec":
        unknown = set(doc) - _TOP_KEYS
        if unknown:
            raise InvalidSpec(f"unknown config keys: {sorted(unknown)}")
        version = doc.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise InvalidSpec(f"config schema_version {version} is not supported (expected {SCHEMA_VERSION})")
        teacher = dict(DEFAULT_TEACHER)
        bad = set(doc.get("teacher", {})) - set(DEFAULT_TEACHER)
        if bad:
            raise InvalidSpec(f"unknown teacher keys: {sorted(bad)}")
        teacher.update(doc.get("teacher", {}))
        spec = cls(
            dataset=dict(doc.get("dataset", DEFAULT_DATASET)),
            teacher=teacher,
            arms=list(doc.get("arms", ["ta-dfkd", "no-cls", "baseline"])),
            seeds=[int(s) for s in doc.get("seeds", [1, 2, 3])],
            k=int(doc.get("k", 10)),
            train=dict(doc.get("train", {})),
            out=doc.get("out"),
        )
        spec.validate()
        return spec

    def validate(self) -> None:
        if len(set(self.arms)) != len(self.arms):
            raise InvalidSpec("arm names must be unique")
        for arm in self.arms:
            _arm_overrides(arm)
        if not self.seeds:
            raise InvalidSpec("at least one seed is required")
        if int(self.teacher["epochs"]) < 0:
            raise InvalidSpec("teacher epochs must be >= 0")
        TrainConfig.from_dict(self.train)


def _arm_overrides(arm: str) -> dict:
    if arm not in ARMS:
        raise UsageError(f"unknown arm {arm!r}; valid arms: {', '.join(ARMS)}")
    return ARMS[arm]


def _parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override {item!r} is not of the form key=value")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _load_spec(path) -> ExperimentSpec:
    if path is None:
        return ExperimentSpec()
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidSpec(f"{path}: invalid JSON ({exc})") from None
    return ExperimentSpec.from_dict(doc)


def _out_root(args, spec: ExperimentSpec) -> Path:
    """--out beats TADFKD_OUT, which beats the config's ``out``."""
    if getattr(args, "out", None):
        return Path(args.out)
    if os.environ.get("TADFKD_OUT"):
        return Path(os.environ["TADFKD_OUT"])
    return Path(spec.out or "runs")


def _train_config(spec: ExperimentSpec, arm: str, seed: int, overrides: dict) -> TrainConfig:
    doc = {**spec.train, **overrides, **_arm_overrides(arm), "seed": seed}
    return TrainConfig.from_dict(doc)


def _snapshot_epochs(spec: ExperimentSpec, count: Optional[int]) -> list:
    epochs = int(spec.teacher["epochs"])
    if count is None:
        return list(spec.teacher["snapshot_epochs"]) or [epochs]
    if count < 1:
        raise UsageError("--snapshots must be >= 1")
    return sorted({max(1, round(epochs * i / count)) for i in range(1, count + 1)})


def _train_teachers(spec: ExperimentSpec, out_root: Path, snapshots=None, seed=None) -> list:
    t = spec.teacher
    seed = int(t["seed"] if seed is None else seed)
    dataset = make_dataset(spec.dataset)
    snaps = train_teacher(
        dataset,
        int(t["epochs"]),
        lr=float(t["lr"]),
        seed=seed,
        snapshot_epochs=_snapshot_epochs(spec, snapshots),
        hidden=tuple(t["hidden"]),
        batch=int(t["batch"]),
        schedule=t["schedule"],
        accuracy_floor=float(t["accuracy_floor"]),
    )
    teacher_dir = out_root / "teachers"
    teacher_dir.mkdir(parents=True, exist_ok=True)
    for s in snaps:
        s.path = teacher_dir / f"teacher_s{seed}_e{s.epoch:03d}.json"
        meta = {"epoch": s.epoch, "test_accuracy": s.test_accuracy, "seed": seed, "dataset": spec.dataset}
        save_network(s.network, s.path, meta=meta)
    return snaps


def _distill_one(job: tuple) -> tuple:
    """Worker for one (teacher, arm, seed) run; returns (run_dir, error or None)."""
    teacher_path, dataset_spec, config_dict, run_dir, labels = job
    try:
        teacher, _ = load_network_with_meta(teacher_path)
        view = make_dataset(dataset_spec).eval_view()
        run_distillation(teacher, TrainConfig.from_dict(config_dict), view, out_dir=Path(run_dir), labels=labels)
        return run_dir, None
    except Exception as exc:  # recorded per run; the matrix carries on
        return run_dir, f"{type(exc).__name__}: {exc}"


def _teacher_labels(path: Path, meta: dict) -> dict:
    return {"teacher": path.stem, "teacher_accuracy": meta.get("test_accuracy")}


# ---------------------------------------------------------------------------
# commands


def cmd_train_teacher(args) -> int:
    spec = _load_spec(args.config)
    out_root = _out_root(args, spec)
    snaps = _train_teachers(spec, out_root, args.snapshots, args.seed)
    rows = [{"epoch": s.epoch, "test_accuracy": s.test_accuracy, "flagged": s.flagged, "path": str(s.path)} for s in snaps]
    if args.format == "json":
        print(json.dumps(rows, indent=2))
    else:
        print(f"{'epoch':>5}  {'test_acc':>8}  flag  checkpoint")
        for r in rows:
            print(f"{r['epoch']:>5}  {r['test_accuracy']:>8.4f}  {'low ' if r['flagged'] else '    '}  {r['path']}")
    return EXIT_OK


def cmd_distill(args) -> int:
    spec = _load_spec(args.config)
    teacher_path = Path(args.teacher)
    teacher, meta = load_network_with_meta(teacher_path)
    config = _train_config(spec, args.arm, args.seed, _parse_overrides(args.override))
    k = args.k if args.k is not None else spec.k
    if k < 1 or k > config.epochs:
        raise UsageError(f"k={k} must lie in [1, epochs={config.epochs}]")
    dataset_spec = (meta or {}).get("dataset") or spec.dataset
    view = make_dataset(dataset_spec).eval_view()
    run_dir = _out_root(args, spec) / "runs" / teacher_path.stem / args.arm / f"seed{args.seed}"
    labels = {**_teacher_labels(teacher_path, meta or {}), "arm": args.arm}
    run = run_distillation(teacher, config, view, out_dir=run_dir, labels=labels)
    result = {
        "run_dir": str(run_dir),
        "fingerprint": run.fingerprint,
        "acc_max": acc_max(run),
        f"acc_last[{k}]": acc_last_k(run, k),
        "empty_events": sum(e["empty_events"] for e in run.epochs),
    }
    if args.format == "json":
        print(json.dumps(result, indent=2))
    else:
        for key, value in result.items():
            print(f"{key}: {value:.4f}" if isinstance(value, float) else f"{key}: {value}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    spec = _load_spec(args.config)
    overrides = _parse_overrides(args.override)
    out_root = _out_root(args, spec)
    k = args.k if args.k is not None else spec.k
    configs = {(arm, seed): _train_config(spec, arm, seed, overrides) for arm in spec.arms for seed in spec.seeds}
    if any(k > c.epochs for c in configs.values()) or k < 1:
        raise UsageError(f"k={k} exceeds the configured epochs")
    snaps = _train_teachers(spec, out_root)
    jobs = []
    for s in snaps:
        labels = _teacher_labels(s.path, {"test_accuracy": s.test_accuracy})
        for arm in spec.arms:
            for seed in spec.seeds:
                run_dir = out_root / "runs" / s.path.stem / arm / f"seed{seed}"
                jobs.append((str(s.path), spec.dataset, configs[(arm, seed)].to_dict(), str(run_dir), {**labels, "arm": arm}))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_distill_one, jobs))
    else:
        results = [_distill_one(job) for job in jobs]

    failures = {run_dir: err for run_dir, err in results if err is not None}
    for run_dir, err in failures.items():
        print(f"run failed: {run_dir}: {err}", file=sys.stderr)
    ok_dirs = [Path(job[3]) for job in jobs if job[3] not in failures]
    ok_arms = {job[4]["arm"] for job in jobs if job[3] not in failures}
    if not ok_dirs:
        print("every run failed", file=sys.stderr)
        return EXIT_FAILED
    runs = [RunRecord.from_dir(d) for d in ok_dirs]
    teachers = [s.path.stem for s in snaps] if not failures else None
    report = write_report(runs, k, out_root / "report", teachers=teachers, methods=spec.arms if not failures else None)
    print(report.to_json() if args.format == "json" else report.to_text(), end="")
    missing = [a for a in spec.arms if a not in ok_arms]
    if missing:
        print(f"no successful runs for arms: {', '.join(missing)}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.runs)
    if not root.is_dir():
        raise FileNotFoundError(f"run directory not found: {root}")
    dirs = sorted(p.parent for p in root.rglob("summary.json"))
    if not dirs:
        raise FileNotFoundError(f"no run summaries under {root}")
    for d in dirs:
        if not (d / "telemetry.csv").exists() or not (d / "config.json").exists():
            raise FileNotFoundError(f"incomplete run directory (telemetry or config missing): {d}")
    runs = [RunRecord.from_dir(d) for d in dirs]
    out_dir = Path(args.out) if args.out else root / "report"
    report = write_report(runs, args.k, out_dir)
    print(report.to_json() if args.format == "json" else report.to_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tadfkd", description="Teacher-agnostic data-free distillation at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="experiment JSON (defaults are used when omitted)")
        sp.add_argument("--out", help="output root (overrides TADFKD_OUT and the config)")
        sp.add_argument("--format", choices=("text", "json"), default="text")

    t = sub.add_parser("train-teacher", help="train a teacher and save snapshot checkpoints")
    common(t)
    t.add_argument("--snapshots", type=int, help="number of evenly spaced snapshots")
    t.add_argument("--seed", type=int, help="teacher seed (overrides the config)")
    t.set_defaults(func=cmd_train_teacher)

    d = sub.add_parser("distill", help="distill one teacher checkpoint into a fresh student")
    common(d)
    d.add_argument("--teacher", required=True, help="teacher checkpoint JSON")
    d.add_argument("--arm", default="ta-dfkd", help=f"method preset: {', '.join(ARMS)}")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--k", type=int, help="epochs averaged for converging accuracy")
    d.add_argument("--override", action="append", metavar="KEY=VALUE", help="raw training config override")
    d.set_defaults(func=cmd_distill)

    a = sub.add_parser("ablate", help="run the teacher x arm x seed matrix and write a report")
    common(a)
    a.add_argument("--jobs", type=int, default=1, help="concurrent runs")
    a.add_argument("--k", type=int)
    a.add_argument("--override", action="append", metavar="KEY=VALUE")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="rebuild report tables and plots from stored runs")
    common(r, config=False)
    r.add_argument("--runs", required=True, help="directory searched recursively for run directories")
    r.add_argument("--k", type=int, default=10)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, InvalidSpec, KTooLarge) as exc:
        print(f"tadfkd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError, ChecksumMismatch, SchemaVersionMismatch) as exc:
        print(f"tadfkd: io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TadfkdError as exc:
        print(f"tadfkd: failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (ValueError, TypeError) as exc:
        print(f"tadfkd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
