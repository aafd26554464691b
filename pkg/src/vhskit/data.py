"""Dataset model, annotation file format, and split management.

On disk a dataset is a directory:

    manifest.json       name, version, and per-sample entries
                        (id, image path, width/height, split, provenance)
    annotations.jsonl   one record per line, fixed field order:
                        sample_id, points, vhs, annotator, timestamp,
                        provenance
    audit.jsonl         append-only log of annotation changes
    images/<id>.png     8-bit grayscale rasters

Coordinates are serialized through repr, which round-trips float64
exactly, so a save/load cycle is lossless. All writes go through a
temp file plus atomic replace.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, ParseError, ValidationError
from .geometry import KeypointSet, calc_vhs, classify_batch

FORMAT_NAME = "vhs-dataset"
FORMAT_VERSION = 1
PROVENANCES = ("human", "pseudo", "phantom")
SPLITS = ("train", "valid", "test", "unlabeled")
VHS_RECORD_TOLERANCE = 1e-6


@dataclass
class AnnotationRecord:
    """One sample's six keypoints plus bookkeeping."""

    sample_id: str
    points: np.ndarray  # (6, 2) float64, normalized
    vhs: float | None = None
    annotator: str = "unknown"
    timestamp: str | None = None
    provenance: str = "human"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (6, 2):
            raise ValidationError(f"{self.sample_id}: expected 6 keypoints, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValidationError(f"{self.sample_id}: non-finite coordinate")
        if np.any(pts < 0.0) or np.any(pts > 1.0):
            raise ValidationError(f"{self.sample_id}: coordinate outside [0, 1]")
        self.points = pts
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"{self.sample_id}: unknown provenance {self.provenance!r}")
        if self.vhs is not None:
            recomputed = calc_vhs(pts)
            if abs(float(self.vhs) - recomputed) > VHS_RECORD_TOLERANCE:
                raise ValidationError(
                    f"{self.sample_id}: recorded score {self.vhs} disagrees with the "
                    f"points ({recomputed:.9f})")

    def keypoints(self) -> KeypointSet:
        return KeypointSet(self.points)

    def to_json_line(self) -> str:
        obj = {
            "sample_id": self.sample_id,
            "points": [[float(x), float(y)] for x, y in self.points],
            "vhs": None if self.vhs is None else float(self.vhs),
            "annotator": self.annotator,
            "timestamp": self.timestamp,
            "provenance": self.provenance,
        }
        return json.dumps(obj)

    @classmethod
    def from_json_obj(cls, obj: dict, context: str = "record") -> "AnnotationRecord":
        if not isinstance(obj, dict):
            raise ParseError(f"{context}: annotation record must be an object")
        missing = [k for k in ("sample_id", "points") if k not in obj]
        if missing:
            raise ParseError(f"{context}: missing fields {missing}")
        pts = obj["points"]
        if not isinstance(pts, list) or len(pts) != 6 or any(
                not isinstance(p, list) or len(p) != 2 for p in pts):
            raise ParseError(f"{context}: sample {obj.get('sample_id')!r} needs exactly 6 [x, y] pairs")
        return cls(
            sample_id=str(obj["sample_id"]),
            points=np.array(pts, dtype=np.float64),
            vhs=None if obj.get("vhs") is None else float(obj["vhs"]),
            annotator=str(obj.get("annotator", "unknown")),
            timestamp=obj.get("timestamp"),
            provenance=str(obj.get("provenance", "human")),
        )


@dataclass
class Sample:
    id: str
    image_path: str | None  # relative to the dataset root; None if in-memory only
    width: int
    height: int
    split: str = "unlabeled"
    provenance: str = "human"
    label: KeypointSet | None = None
    annotation: AnnotationRecord | None = None
    pixels: np.ndarray | None = None  # uint8 (H, W)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"{self.id}: unknown split {self.split!r}")
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"{self.id}: unknown provenance {self.provenance!r}")


@dataclass
class RejectedRecord:
    context: str  # sample id or "line N"
    reason: str


@dataclass
class LoadReport:
    discovered: int = 0
    loaded: int = 0
    rejected: list[RejectedRecord] = field(default_factory=list)

    def summary(self) -> str:
        return f"{self.loaded} loaded, {len(self.rejected)} rejected, {self.discovered} discovered"


class Dataset:
    """Insertion-ordered collection of samples with image access."""

    def __init__(self, name: str, version: int = FORMAT_VERSION, root: Path | str | None = None):
        self.name = name
        self.version = version
        self.root = None if root is None else Path(root)
        self._samples: dict[str, Sample] = {}
        self.load_report: LoadReport | None = None

    def __len__(self) -> int:
        return len(self._samples)

    def __iter__(self):
        return iter(self._samples.values())

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._samples

    @property
    def ids(self) -> list[str]:
        return list(self._samples)

    def add(self, sample: Sample):
        if sample.id in self._samples:
            raise ValidationError(f"duplicate sample id {sample.id!r}")
        self._samples[sample.id] = sample

    def get(self, sample_id: str) -> Sample:
        try:
            return self._samples[sample_id]
        except KeyError:
            raise DataError(f"unknown sample id {sample_id!r}") from None

    def by_split(self, split: str) -> list[Sample]:
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}")
        return [s for s in self._samples.values() if s.split == split]

    def split_counts(self) -> dict[str, int]:
        counts = {s: 0 for s in SPLITS}
        for sample in self._samples.values():
            counts[sample.split] += 1
        return counts

    def _raw_pixels(self, sample: Sample) -> np.ndarray:
        if sample.pixels is not None:
            return sample.pixels
        if self.root is None or sample.image_path is None:
            raise DataError(f"{sample.id}: no pixel data and no backing file")
        path = self.root / sample.image_path
        try:
            with Image.open(path) as im:
                return np.asarray(im.convert("L"), dtype=np.uint8)
        except FileNotFoundError:
            raise DataError(f"{sample.id}: image file missing at {path}") from None

    def get_image(self, sample_id: str, size: int | None = None) -> np.ndarray:
        """(1, S, S) float64 in [0, 1], resampled to ``size`` when asked."""
        sample = self.get(sample_id)
        raw = self._raw_pixels(sample)
        if size is not None and raw.shape != (size, size):
            im = Image.fromarray(raw, mode="L").resize((size, size), Image.BILINEAR)
            raw = np.asarray(im, dtype=np.uint8)
        return (raw.astype(np.float64) / 255.0)[None]

    def image_bytes(self, sample_id: str) -> bytes:
        """The sample's raster encoded as PNG, for serving over HTTP."""
        import io

        sample = self.get(sample_id)
        if sample.pixels is None and self.root is not None and sample.image_path is not None:
            path = self.root / sample.image_path
            if path.suffix.lower() == ".png" and path.exists():
                return path.read_bytes()
        buf = io.BytesIO()
        Image.fromarray(self._raw_pixels(sample), mode="L").save(buf, format="PNG")
        return buf.getvalue()


def _atomic_write(path: Path, payload: bytes):
    tmp = path.with_name(f"{path.name}.tmp-{os.getpid()}")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def save_dataset(dataset: Dataset, root: Path | str) -> Path:
    """Write manifest, annotations, and any in-memory images under root."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    lines = []
    for sample in dataset:
        image_rel = sample.image_path or f"images/{sample.id}.png"
        if sample.pixels is not None:
            buf_path = root / image_rel
            buf_path.parent.mkdir(parents=True, exist_ok=True)
            import io

            buf = io.BytesIO()
            Image.fromarray(sample.pixels, mode="L").save(buf, format="PNG")
            _atomic_write(buf_path, buf.getvalue())
        elif dataset.root is not None and sample.image_path is not None:
            src = dataset.root / sample.image_path
            dst = root / image_rel
            if src.resolve() != dst.resolve():
                dst.parent.mkdir(parents=True, exist_ok=True)
                _atomic_write(dst, src.read_bytes())
        entries.append({
            "id": sample.id,
            "image": image_rel,
            "width": sample.width,
            "height": sample.height,
            "split": sample.split,
            "provenance": sample.provenance,
        })
        if sample.annotation is not None:
            lines.append(sample.annotation.to_json_line())
    manifest = {
        "format": FORMAT_NAME,
        "version": dataset.version,
        "name": dataset.name,
        "samples": entries,
    }
    _atomic_write(root / "manifest.json", (json.dumps(manifest, indent=2) + "\n").encode("utf-8"))
    _atomic_write(root / "annotations.jsonl",
                  ("".join(line + "\n" for line in lines)).encode("utf-8"))
    dataset.root = root
    return root


def load_dataset(root: Path | str, on_error: str = "raise") -> Dataset:
    """Read a dataset directory back into memory.

    ``on_error="raise"`` stops at the first bad record; ``"collect"``
    loads everything valid and files the rest in ``dataset.load_report``
    so nothing is dropped silently either way.
    """
    if on_error not in ("raise", "collect"):
        raise ConfigError("on_error must be 'raise' or 'collect'")
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"manifest.json: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise ParseError(f"manifest.json: format is {manifest.get('format')!r}, expected {FORMAT_NAME!r}")

    report = LoadReport()
    dataset = Dataset(str(manifest.get("name", "dataset")),
                      int(manifest.get("version", FORMAT_VERSION)), root)

    def reject(context: str, reason: str, exc_type=ValidationError):
        if on_error == "raise":
            raise exc_type(f"{context}: {reason}")
        report.rejected.append(RejectedRecord(context, reason))

    annotations: dict[str, AnnotationRecord] = {}
    ann_path = root / "annotations.jsonl"
    if ann_path.exists():
        with open(ann_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                context = f"annotations.jsonl line {lineno}"
                try:
                    record = AnnotationRecord.from_json_obj(json.loads(line), context)
                except json.JSONDecodeError as exc:
                    reject(context, f"invalid record syntax: {exc}", ParseError)
                    continue
                except (ParseError, ValidationError) as exc:
                    reject(context, str(exc), type(exc))
                    continue
                if record.sample_id in annotations:
                    reject(context, f"duplicate annotation for {record.sample_id!r}", ValidationError)
                    continue
                annotations[record.sample_id] = record

    seen_ids = set()
    entries = manifest.get("samples", [])
    report.discovered = len(entries)
    claimed = set()
    for i, entry in enumerate(entries):
        context = f"manifest sample {i}"
        sid = entry.get("id")
        if not sid or not isinstance(sid, str):
            reject(context, "missing or non-string id", ParseError)
            continue
        context = f"sample {sid!r}"
        if sid in seen_ids:
            reject(context, "duplicate sample id", ValidationError)
            continue
        seen_ids.add(sid)
        split = entry.get("split", "unlabeled")
        provenance = entry.get("provenance", "human")
        record = annotations.get(sid)
        if split in ("valid", "test") and record is None:
            reject(context, f"{split} sample has no annotation", ValidationError)
            continue
        if provenance == "pseudo" and split != "train":
            reject(context, f"pseudo provenance outside train (split {split!r})", ValidationError)
            continue
        image_rel = entry.get("image")
        if not image_rel or not (root / image_rel).exists():
            reject(context, f"image file missing: {image_rel!r}", ValidationError)
            continue
        try:
            sample = Sample(
                id=sid, image_path=image_rel,
                width=int(entry.get("width", 0)), height=int(entry.get("height", 0)),
                split=split, provenance=provenance,
                label=None if record is None else record.keypoints(),
                annotation=record)
        except ValidationError as exc:
            reject(context, str(exc))
            continue
        dataset.add(sample)
        claimed.add(sid)
        report.loaded += 1
    for sid in annotations:
        if sid not in claimed and sid not in seen_ids:
            reject(f"annotation {sid!r}", "no matching manifest entry", ValidationError)
    dataset.load_report = report
    return dataset


def update_annotation(root: Path | str, record: AnnotationRecord) -> AnnotationRecord:
    """Insert or replace one sample's annotation on disk, atomically,
    leaving an audit entry. Returns the record as written."""
    root = Path(root)
    dataset = load_dataset(root)
    sample = dataset.get(record.sample_id)  # DataError if unknown

    previous = sample.annotation
    ann_path = root / "annotations.jsonl"
    lines = []
    replaced = False
    if ann_path.exists():
        for line in ann_path.read_text("utf-8").splitlines():
            if not line.strip():
                continue
            if json.loads(line).get("sample_id") == record.sample_id:
                lines.append(record.to_json_line())
                replaced = True
            else:
                lines.append(line)
    if not replaced:
        lines.append(record.to_json_line())
    _atomic_write(ann_path, ("".join(line + "\n" for line in lines)).encode("utf-8"))

    audit = {
        "sample_id": record.sample_id,
        "action": "update" if previous is not None else "create",
        "annotator": record.annotator,
        "timestamp": record.timestamp,
        "previous_vhs": None if previous is None else previous.vhs,
        "new_vhs": record.vhs,
    }
    with open(root / "audit.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(audit) + "\n")
    return record


def _largest_remainder(total: int, fractions) -> list[int]:
    ideals = [total * f for f in fractions]
    counts = [int(np.floor(v)) for v in ideals]
    short = total - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (ideals[i] - counts[i], -i), reverse=True)
    for i in order[:short]:
        counts[i] += 1
    return counts


def split_dataset(dataset: Dataset, fractions, seed: int) -> Dataset:
    """Assign train/valid/test to the labeled samples, stratified by class.

    Each class's samples are shuffled deterministically and divided by
    largest remainder; small cross-class corrections then make the global
    counts hit the largest-remainder targets for the whole set. Unlabeled
    samples keep their split.
    """
    from .rng import derive_rng

    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ConfigError("fractions must be (train, valid, test)")
    if any(f < 0 for f in fractions):
        raise ConfigError("fractions must be non-negative")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions sum to {sum(fractions)}, expected 1")

    labeled = [s for s in dataset if s.label is not None]
    if not labeled:
        raise ConfigError("dataset has no labeled samples to split")
    n = len(labeled)
    targets = _largest_remainder(n, fractions)
    for split_name, frac, tgt in zip(("train", "valid", "test"), fractions, targets):
        if frac > 0 and tgt == 0:
            raise ConfigError(f"split {split_name!r} would be empty at these fractions")

    scores = np.array([calc_vhs(s.label) for s in labeled])
    classes = classify_batch(scores)
    by_class: dict[int, list[Sample]] = {}
    for sample, cls in zip(labeled, classes):
        by_class.setdefault(int(cls), []).append(sample)

    class_ids = sorted(by_class)
    quota = {c: _largest_remainder(len(by_class[c]), fractions) for c in class_ids}

    # nudge per-class quotas until global totals match, moving from the
    # most over-allocated class to keep proportions within one sample
    col_sums = [sum(quota[c][j] for c in class_ids) for j in range(3)]
    while col_sums != targets:
        over = next(j for j in range(3) if col_sums[j] > targets[j])
        under = next(j for j in range(3) if col_sums[j] < targets[j])
        best = max(
            (c for c in class_ids if quota[c][over] > 0),
            key=lambda c: (quota[c][over] - len(by_class[c]) * fractions[over])
            - (quota[c][under] - len(by_class[c]) * fractions[under]),
        )
        quota[best][over] -= 1
        quota[best][under] += 1
        col_sums[over] -= 1
        col_sums[under] += 1

    for c in class_ids:
        members = by_class[c]
        order = derive_rng(seed, "split", c).permutation(len(members))
        t_train, t_valid, _ = quota[c]
        for rank, idx in enumerate(order):
            if rank < t_train:
                members[idx].split = "train"
            elif rank < t_train + t_valid:
                members[idx].split = "valid"
            else:
                members[idx].split = "test"
    return dataset
