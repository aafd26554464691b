"""Run orchestration: config handling, training runs, pseudo-label runs,
evaluation, and the artifacts they leave behind.

A run directory receives structured logs (one object per line), snapshot
files, and a manifest written atomically at the end. Only manifest
timestamps vary between identical runs; every metric, log line, and
snapshot byte is reproducible from (config, seed, inputs). A lock file
makes training commands exclusive per output directory.
"""

from __future__ import annotations

import copy
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import AnnotationRecord, Dataset, load_dataset
from .errors import ConfigError, DataError, SnapshotError, StateError, VhskitError
from .geometry import EF_EPSILON, VHS_FACTOR, calc_vhs, classify
from .model import (KeypointRegressor, ModelConfig, load_snapshot, save_snapshot)
from .optim import AdamWState, CosineSchedule
from .pseudo import McConfig, RoundReport, run_pseudo_rounds
from .rng import derive_rng
from .training import SoftLabelStore, TrainingData, confusion_matrix, evaluate, train_epoch

LOCK_NAME = "run.lock"


@dataclass
class RunConfig:
    """Everything a run needs; serializable so runs are reproducible."""

    dataset_root: str = "dataset"
    output_dir: str = "run"
    model: ModelConfig = field(default_factory=ModelConfig)
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    epochs: int = 1000
    batch_size: int = 16
    accumulation_steps: int = 1
    seed: int = 0
    checkpoint_every: int = 10
    soft_window: int | None = None
    mc: McConfig = field(default_factory=McConfig)
    pseudo_epochs: int = 15
    pseudo_lr_max: float = 3e-4

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1 or self.accumulation_steps < 1:
            raise ConfigError("batch_size and accumulation_steps must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.pseudo_epochs < 1:
            raise ConfigError("pseudo_epochs must be >= 1")

    def to_dict(self) -> dict:
        return {
            "dataset_root": self.dataset_root,
            "output_dir": self.output_dir,
            "model": self.model.to_dict(),
            "optimizer": {
                "lr_max": self.lr_max, "lr_min": self.lr_min,
                "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "weight_decay": self.weight_decay,
            },
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "accumulation_steps": self.accumulation_steps,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "soft_window": self.soft_window,
            "mc": self.mc.to_dict(),
            "pseudo_epochs": self.pseudo_epochs,
            "pseudo_lr_max": self.pseudo_lr_max,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        opt = data.get("optimizer", {})
        kwargs = dict(
            dataset_root=str(data.get("dataset_root", "dataset")),
            output_dir=str(data.get("output_dir", "run")),
            model=ModelConfig.from_dict(data.get("model", {})),
            epochs=int(data.get("epochs", 1000)),
            batch_size=int(data.get("batch_size", 16)),
            accumulation_steps=int(data.get("accumulation_steps", 1)),
            seed=int(data.get("seed", 0)),
            checkpoint_every=int(data.get("checkpoint_every", 10)),
            soft_window=None if data.get("soft_window") is None else int(data["soft_window"]),
            mc=McConfig.from_dict(data.get("mc", {})),
            pseudo_epochs=int(data.get("pseudo_epochs", 15)),
            pseudo_lr_max=float(data.get("pseudo_lr_max", 3e-4)),
        )
        for key in ("lr_max", "lr_min", "beta1", "beta2", "eps", "weight_decay"):
            if key in opt:
                kwargs[key] = float(opt[key])
        return cls(**kwargs)

    @classmethod
    def load(cls, path: Path | str) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text("utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid config syntax ({exc})") from exc


def apply_overrides(data: dict, overrides) -> dict:
    """Apply dotted key=value strings onto a nested config dict.

    Values are parsed as JSON when possible ("0.05", "true", "null"),
    falling back to plain strings, so CLI overrides keep their types.
    """
    out = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = value
    return out


def _atomic_json(path: Path, obj: dict):
    tmp = path.with_name(f"{path.name}.tmp-{os.getpid()}")
    tmp.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)


class _RunLock:
    """O_EXCL lock file; training commands are exclusive per directory."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / LOCK_NAME
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StateError(
                f"{self.path} exists; another run owns this directory "
                "(remove the lock if that run is dead)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))

    def release(self):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass


@dataclass
class RunManifest:
    kind: str
    config: dict
    started_at: str
    finished_at: str
    metrics: dict
    checkpoints: list[str]
    log_path: str

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "config": self.config,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "metrics": self.metrics,
            "checkpoints": self.checkpoints,
            "log_path": self.log_path,
        }


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _load_run_dataset(config: RunConfig) -> Dataset:
    root = Path(config.dataset_root)
    if not root.exists():
        raise DataError(f"dataset root not found: {root}")
    return load_dataset(root)


def cmd_train(config: RunConfig) -> tuple[int, RunManifest]:
    """Supervised training per the composite-loss loop; see train_epoch."""
    started = _now()
    dataset = _load_run_dataset(config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = _RunLock(out)
    try:
        size = config.model.input_size
        train_data = TrainingData.from_dataset(dataset, "train", size)
        valid_samples = dataset.by_split("valid")
        valid_data = TrainingData.from_dataset(dataset, "valid", size) if valid_samples else None

        model = KeypointRegressor(config.model, rng=derive_rng(config.seed, "init"))
        opt_state = AdamWState.init(model.n_params, beta1=config.beta1, beta2=config.beta2,
                                    eps=config.eps, weight_decay=config.weight_decay)
        schedule = CosineSchedule(config.lr_max, config.lr_min, max(config.epochs, 1))
        soft_store = SoftLabelStore(window=config.soft_window)

        log_path = out / "epochs.jsonl"
        checkpoints: list[str] = []
        best: tuple[float, int] | None = None
        last_report = None

        save_snapshot(model.snapshot(epoch=0), out / "snapshot-initial.bin")
        checkpoints.append("snapshot-initial.bin")

        with open(log_path, "w", encoding="utf-8") as log:
            for epoch in range(1, config.epochs + 1):
                report = train_epoch(
                    model, train_data, opt_state, schedule, epoch, soft_store,
                    batch_size=config.batch_size, accumulation_steps=config.accumulation_steps,
                    seed=config.seed, valid_data=valid_data)
                log.write(json.dumps(report.to_dict()) + "\n")
                last_report = report
                if epoch % config.checkpoint_every == 0:
                    name = f"snapshot-epoch-{epoch:05d}.bin"
                    save_snapshot(model.snapshot(epoch=epoch), out / name)
                    checkpoints.append(name)
                if report.valid is not None and (best is None or report.valid.accuracy > best[0]):
                    best = (report.valid.accuracy, epoch)
                    save_snapshot(model.snapshot(epoch=epoch), out / "snapshot-best.bin")

        save_snapshot(model.snapshot(epoch=config.epochs), out / "snapshot-final.bin")
        checkpoints.append("snapshot-final.bin")
        if best is not None:
            checkpoints.append("snapshot-best.bin")

        metrics = {"epochs_run": config.epochs}
        if last_report is not None:
            metrics["final_train"] = last_report.to_dict()
        if best is not None:
            metrics["best_valid_accuracy"] = best[0]
            metrics["best_valid_epoch"] = best[1]
        manifest = RunManifest("train", config.to_dict(), started, _now(), metrics,
                               checkpoints, str(log_path))
        _atomic_json(out / "run-manifest.json", manifest.to_dict())
        return 0, manifest
    finally:
        lock.release()


def export_pseudo_labels(report: RoundReport, path: Path):
    """Write a round's admitted set in the annotation format, coordinates
    clamped to the unit square (targets used in training stay raw)."""
    lines = []
    for sample in report.admitted:
        pts = np.clip(sample.points.points, 0.0, 1.0)
        ef = float(np.hypot(pts[4, 0] - pts[5, 0], pts[4, 1] - pts[5, 1]))
        vhs = calc_vhs(pts) if ef > EF_EPSILON else None
        record = AnnotationRecord(
            sample_id=sample.id, points=pts, vhs=vhs,
            annotator=f"mc-dropout-round-{report.round_index}",
            timestamp=None, provenance="pseudo")
        lines.append(record.to_json_line())
    tmp = path.with_name(f"{path.name}.tmp-{os.getpid()}")
    tmp.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    os.replace(tmp, path)


def cmd_pseudo(config: RunConfig, snapshot_path: Path | str) -> tuple[int, RunManifest]:
    """Confidence-filtered self-training from a trained snapshot."""
    started = _now()
    snap = load_snapshot(snapshot_path)
    if snap.config != config.model:
        raise ConfigError(
            "snapshot architecture does not match the configured model "
            f"({snap.config.to_dict()} vs {config.model.to_dict()})")
    dataset = _load_run_dataset(config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = _RunLock(out)
    try:
        size = config.model.input_size
        labeled = TrainingData.from_dataset(dataset, "train", size)
        pool_samples = dataset.by_split("unlabeled")
        pool = (TrainingData.from_dataset(dataset, "unlabeled", size, require_labels=False)
                if pool_samples else None)
        valid_samples = dataset.by_split("valid")
        valid_data = TrainingData.from_dataset(dataset, "valid", size) if valid_samples else None
        test_samples = dataset.by_split("test")
        test_data = TrainingData.from_dataset(dataset, "test", size) if test_samples else None

        model = KeypointRegressor.from_snapshot(snap)
        baseline = evaluate(model, test_data) if test_data is not None else None

        opt_state = AdamWState.init(model.n_params, beta1=config.beta1, beta2=config.beta2,
                                    eps=config.eps, weight_decay=config.weight_decay)
        schedule = CosineSchedule(config.pseudo_lr_max, config.lr_min, config.pseudo_epochs)
        reports = run_pseudo_rounds(
            model, labeled, pool, config.mc,
            epochs=config.pseudo_epochs, opt_state=opt_state, schedule=schedule,
            batch_size=config.batch_size, accumulation_steps=config.accumulation_steps,
            seed=config.seed, valid_data=valid_data, soft_window=config.soft_window)

        log_path = out / "rounds.jsonl"
        with open(log_path, "w", encoding="utf-8") as log:
            for report in reports:
                log.write(json.dumps(report.to_dict()) + "\n")
                export_pseudo_labels(report, out / f"pseudo-round-{report.round_index:03d}.jsonl")

        save_snapshot(model.snapshot(epoch=config.pseudo_epochs), out / "snapshot-pseudo-final.bin")
        post = evaluate(model, test_data) if test_data is not None else None

        metrics = {
            "rounds": len(reports),
            "final_confident": reports[-1].n_confident,
            "baseline_test": None if baseline is None else baseline.to_dict(),
            "post_pseudo_test": None if post is None else post.to_dict(),
        }
        manifest = RunManifest("pseudo", config.to_dict(), started, _now(), metrics,
                               ["snapshot-pseudo-final.bin"], str(log_path))
        _atomic_json(out / "run-manifest.json", manifest.to_dict())
        return 0, manifest
    finally:
        lock.release()


def cmd_eval(snapshot_path: Path | str, dataset_root: Path | str, split: str = "test") -> tuple[int, dict]:
    """Loss, accuracy, and the 3x3 confusion matrix for one split."""
    snap = load_snapshot(snapshot_path)
    root = Path(dataset_root)
    if not root.exists():
        raise DataError(f"dataset root not found: {root}")
    dataset = load_dataset(root)
    model = KeypointRegressor.from_snapshot(snap)
    data = TrainingData.from_dataset(dataset, split, snap.config.input_size)
    report = evaluate(model, data)
    confusion = confusion_matrix(model, data)
    result = {
        "split": split,
        "snapshot": str(snapshot_path),
        **report.to_dict(),
        "confusion": confusion.tolist(),
    }
    return 0, result


def cmd_phantoms(output_root: Path | str, *, n_train: int = 200, n_valid: int = 50,
                 n_test: int = 100, n_unlabeled: int = 400, side: int = 64,
                 seed: int = 2026, vhs_range: tuple[float, float] = (6.5, 11.5),
                 noise: float = 0.02) -> tuple[int, dict]:
    """Generate a synthetic dataset on disk; repeat runs are byte-identical."""
    from .phantoms import make_phantom_bundle
    from .data import save_dataset

    dataset = make_phantom_bundle(
        n_train=n_train, n_valid=n_valid, n_test=n_test, n_unlabeled=n_unlabeled,
        side=side, seed=seed, vhs_range=vhs_range, noise=noise)
    save_dataset(dataset, Path(output_root))
    summary = {
        "root": str(output_root),
        "name": dataset.name,
        "splits": dataset.split_counts(),
        "side": side,
        "seed": seed,
    }
    return 0, summary


def run_command(fn, *args, **kwargs):
    """Uniform command wrapper: structured diagnostics, nonzero exit."""
    try:
        return fn(*args, **kwargs)
    except VhskitError as exc:
        diagnostic = {"error": {"code": type(exc).__name__, "message": str(exc)}}
        print(json.dumps(diagnostic), flush=True)
        return 1, diagnostic
