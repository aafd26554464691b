"""Composite keypoint loss and the epoch training loop.

The per-sample loss combines three L1 terms: predicted vs annotated
coordinates (weight 10), the heart score computed from the prediction vs
the score computed from the annotation (weight 0.1), and, once training
has run long enough to trust them, predicted coordinates vs a soft label
(weight 1). Soft labels are the running mean of the model's own
deterministic predictions, folded in after every epoch.

Coordinate L1 terms average over the 12 outputs; the score term is a
scalar absolute difference. Batch loss is the mean of per-sample losses.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import ConfigError, DataError, DegenerateVertebraError, ShapeError
from .geometry import EF_EPSILON, VHS_FACTOR, classify_batch, vhs_batch_with_grad
from .model import ForwardMode, KeypointRegressor, predict_batch
from .optim import AdamWState, CosineSchedule, GradientAccumulator, adamw_step
from .rng import derive_rng

if TYPE_CHECKING:
    from .data import Dataset

POINTS_WEIGHT = 10.0
VHS_WEIGHT = 0.1
SOFT_WEIGHT = 1.0
SOFT_LABEL_START_EPOCH = 10  # soft term joins strictly after this epoch


@dataclass(frozen=True)
class LossBreakdown:
    """Weighted contributions of each loss term, averaged over the batch."""

    points_term: float
    vhs_term: float
    soft_term: float

    @property
    def total(self) -> float:
        return self.points_term + self.vhs_term + self.soft_term


def _label_vhs_strict(labels: np.ndarray) -> np.ndarray:
    pts = labels.reshape(-1, 6, 2)
    ab = np.hypot(pts[:, 0, 0] - pts[:, 1, 0], pts[:, 0, 1] - pts[:, 1, 1])
    cd = np.hypot(pts[:, 2, 0] - pts[:, 3, 0], pts[:, 2, 1] - pts[:, 3, 1])
    ef = np.hypot(pts[:, 4, 0] - pts[:, 5, 0], pts[:, 4, 1] - pts[:, 5, 1])
    short = np.flatnonzero(ef <= EF_EPSILON)
    if short.size:
        raise DegenerateVertebraError(
            f"label {short[0]} has vertebral segment length {ef[short[0]]:.3g} <= {EF_EPSILON}")
    return VHS_FACTOR * (ab + cd) / ef


def composite_loss_batch(preds: np.ndarray, labels: np.ndarray, epoch: int,
                         soft: np.ndarray | None = None,
                         soft_mask: np.ndarray | None = None,
                         label_vhs: np.ndarray | None = None,
                         ) -> tuple[LossBreakdown, np.ndarray]:
    """Batch loss and per-sample gradients.

    Returns the breakdown (batch means) and d(per-sample loss)/d(pred) of
    shape (B, 12); dividing by B gives the gradient of the batch mean.
    The score term clamps a near-zero predicted vertebral length and
    contributes no gradient through the clamped denominator.
    """
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.ndim != 2 or preds.shape[1] != 12 or preds.shape != labels.shape:
        raise ShapeError(f"expected matching (B, 12) arrays, got {preds.shape} and {labels.shape}")
    n = preds.shape[0]
    if n == 0:
        raise ConfigError("empty batch")
    if label_vhs is None:
        label_vhs = _label_vhs_strict(labels)

    diff = preds - labels
    points_l1 = np.mean(np.abs(diff), axis=1)
    grad = (POINTS_WEIGHT / 12.0) * np.sign(diff)

    pred_vhs, dvhs = vhs_batch_with_grad(preds, ef_floor=EF_EPSILON)
    vhs_l1 = np.abs(pred_vhs - label_vhs)
    grad += VHS_WEIGHT * np.sign(pred_vhs - label_vhs)[:, None] * dvhs

    soft_term = 0.0
    if epoch > SOFT_LABEL_START_EPOCH and soft is not None:
        soft = np.asarray(soft, dtype=np.float64)
        if soft.shape != preds.shape:
            raise ShapeError(f"soft labels shaped {soft.shape}, expected {preds.shape}")
        mask = np.ones(n) if soft_mask is None else np.asarray(soft_mask, dtype=np.float64)
        sdiff = preds - soft
        soft_l1 = np.mean(np.abs(sdiff), axis=1) * mask
        grad += (SOFT_WEIGHT / 12.0) * np.sign(sdiff) * mask[:, None]
        soft_term = SOFT_WEIGHT * float(np.mean(soft_l1))

    breakdown = LossBreakdown(
        points_term=POINTS_WEIGHT * float(np.mean(points_l1)),
        vhs_term=VHS_WEIGHT * float(np.mean(vhs_l1)),
        soft_term=soft_term,
    )
    return breakdown, grad


def composite_loss(pred: np.ndarray, label: np.ndarray, epoch: int,
                   soft: np.ndarray | None = None) -> tuple[LossBreakdown, np.ndarray]:
    """Single-sample convenience wrapper; gradient comes back as (12,)."""
    soft_b = None if soft is None else np.asarray(soft, dtype=np.float64)[None]
    breakdown, grad = composite_loss_batch(
        np.asarray(pred, dtype=np.float64)[None],
        np.asarray(label, dtype=np.float64)[None],
        epoch, soft=soft_b)
    return breakdown, grad[0]


class SoftLabelStore:
    """Per-sample mean of deterministic predictions across completed epochs.

    With ``window=None`` (the default) the mean covers the whole history
    via a running update; with a positive window only the most recent
    ``window`` epochs count, which needs the history kept around.
    """

    __slots__ = ("_mean", "_count", "window", "_history")

    def __init__(self, window: int | None = None):
        if window is not None and window < 1:
            raise ConfigError("soft label window must be >= 1 epoch")
        self.window = window
        self._mean: dict[str, np.ndarray] = {}
        self._count: dict[str, int] = {}
        self._history: dict[str, deque] = {}

    def __len__(self) -> int:
        return len(self._mean)

    def update(self, ids, preds: np.ndarray):
        preds = np.asarray(preds, dtype=np.float64)
        if preds.shape != (len(ids), 12):
            raise ShapeError(f"expected ({len(ids)}, 12) predictions, got {preds.shape}")
        for sample_id, p in zip(ids, preds):
            c = self._count.get(sample_id, 0) + 1
            self._count[sample_id] = c
            if self.window is None:
                if c == 1:
                    self._mean[sample_id] = p.copy()
                else:
                    self._mean[sample_id] += (p - self._mean[sample_id]) / c
            else:
                hist = self._history.setdefault(sample_id, deque(maxlen=self.window))
                hist.append(p.copy())
                self._mean[sample_id] = np.mean(np.stack(hist), axis=0)

    def count(self, sample_id: str) -> int:
        return self._count.get(sample_id, 0)

    def mean(self, sample_id: str) -> np.ndarray | None:
        m = self._mean.get(sample_id)
        return None if m is None else m.copy()

    def means_for(self, ids) -> tuple[np.ndarray, np.ndarray]:
        """(B, 12) running means plus a 0/1 mask of which ids have one."""
        out = np.zeros((len(ids), 12))
        mask = np.zeros(len(ids))
        for i, sample_id in enumerate(ids):
            m = self._mean.get(sample_id)
            if m is not None:
                out[i] = m
                mask[i] = 1.0
        return out, mask


@dataclass
class TrainingData:
    """Images and (optionally) flat labels for one split, in a fixed order."""

    ids: list[str]
    images: np.ndarray  # (N, 1, S, S) float64 in [0, 1]
    labels: np.ndarray | None  # (N, 12) or None for unlabeled pools
    label_vhs: np.ndarray | None

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_dataset(cls, dataset: "Dataset", split: str, input_size: int,
                     require_labels: bool = True) -> "TrainingData":
        samples = dataset.by_split(split)
        ids, images, labels, scores = [], [], [], []
        for sample in samples:
            if require_labels:
                if sample.label is None:
                    warnings.warn(f"skipping {sample.id}: no annotation in split {split!r}")
                    continue
                flat = sample.label.flatten()
                pts = flat.reshape(6, 2)
                ef = float(np.hypot(pts[4, 0] - pts[5, 0], pts[4, 1] - pts[5, 1]))
                if ef <= EF_EPSILON:
                    warnings.warn(f"skipping {sample.id}: degenerate vertebral segment in annotation")
                    continue
                ab = float(np.hypot(pts[0, 0] - pts[1, 0], pts[0, 1] - pts[1, 1]))
                cd = float(np.hypot(pts[2, 0] - pts[3, 0], pts[2, 1] - pts[3, 1]))
                labels.append(flat)
                scores.append(VHS_FACTOR * (ab + cd) / ef)
            ids.append(sample.id)
            images.append(dataset.get_image(sample.id, size=input_size))
        if not ids:
            raise ConfigError(f"split {split!r} has no usable samples")
        stacked = np.stack(images)
        if require_labels:
            return cls(ids, stacked, np.stack(labels), np.asarray(scores))
        return cls(ids, stacked, None, None)

    def subset(self, indices) -> "TrainingData":
        idx = np.asarray(indices, dtype=int)
        return TrainingData(
            [self.ids[i] for i in idx],
            self.images[idx],
            None if self.labels is None else self.labels[idx],
            None if self.label_vhs is None else self.label_vhs[idx],
        )


@dataclass(frozen=True)
class EvalReport:
    n: int
    loss_points: float
    loss_vhs: float
    loss_total: float
    accuracy: float
    n_degenerate: int

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "loss_points": self.loss_points,
            "loss_vhs": self.loss_vhs,
            "loss_total": self.loss_total,
            "accuracy": self.accuracy,
            "n_degenerate": self.n_degenerate,
        }


def evaluate(model: KeypointRegressor, data: TrainingData, chunk: int = 256) -> EvalReport:
    """Deterministic eval: composite loss on raw outputs; classification on
    predictions clamped to the unit square. A clamped prediction whose
    vertebral segment is still near-degenerate counts as wrong."""
    if data.labels is None:
        raise DataError("evaluation needs a labeled split")
    preds = predict_batch(model, data.images, chunk=chunk)
    breakdown, _ = composite_loss_batch(preds, data.labels, epoch=0, label_vhs=data.label_vhs)

    clamped = np.clip(preds, 0.0, 1.0).reshape(-1, 6, 2)
    ab = np.hypot(clamped[:, 0, 0] - clamped[:, 1, 0], clamped[:, 0, 1] - clamped[:, 1, 1])
    cd = np.hypot(clamped[:, 2, 0] - clamped[:, 3, 0], clamped[:, 2, 1] - clamped[:, 3, 1])
    ef = np.hypot(clamped[:, 4, 0] - clamped[:, 5, 0], clamped[:, 4, 1] - clamped[:, 5, 1])
    degenerate = ef <= EF_EPSILON
    vhs = VHS_FACTOR * (ab + cd) / np.maximum(ef, EF_EPSILON)
    pred_cls = classify_batch(vhs)
    true_cls = classify_batch(data.label_vhs)
    correct = (~degenerate) & (pred_cls == true_cls)
    return EvalReport(
        n=len(data),
        loss_points=breakdown.points_term,
        loss_vhs=breakdown.vhs_term,
        loss_total=breakdown.total,
        accuracy=float(np.mean(correct)),
        n_degenerate=int(np.sum(degenerate)),
    )


def confusion_matrix(model: KeypointRegressor, data: TrainingData, chunk: int = 256) -> np.ndarray:
    """3x3 counts, rows = annotated class, cols = predicted class.

    Degenerate predicted geometry lands in the large column only if its
    clamped score says so; a zero-length segment maps to the floor score,
    which is huge, so such rows still show up as confident mistakes."""
    if data.labels is None:
        raise DataError("confusion matrix needs a labeled split")
    preds = np.clip(predict_batch(model, data.images, chunk=chunk), 0.0, 1.0).reshape(-1, 6, 2)
    ab = np.hypot(preds[:, 0, 0] - preds[:, 1, 0], preds[:, 0, 1] - preds[:, 1, 1])
    cd = np.hypot(preds[:, 2, 0] - preds[:, 3, 0], preds[:, 2, 1] - preds[:, 3, 1])
    ef = np.hypot(preds[:, 4, 0] - preds[:, 5, 0], preds[:, 4, 1] - preds[:, 5, 1])
    vhs = VHS_FACTOR * (ab + cd) / np.maximum(ef, EF_EPSILON)
    pred_cls = classify_batch(vhs)
    true_cls = classify_batch(data.label_vhs)
    out = np.zeros((3, 3), dtype=np.int64)
    for t, p in zip(true_cls, pred_cls):
        out[t, p] += 1
    return out


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    lr: float
    n_samples: int
    n_steps: int
    loss_points: float
    loss_vhs: float
    loss_soft: float
    loss_total: float
    valid: EvalReport | None = None

    def to_dict(self) -> dict:
        out = {
            "epoch": self.epoch,
            "lr": self.lr,
            "n_samples": self.n_samples,
            "n_steps": self.n_steps,
            "loss_points": self.loss_points,
            "loss_vhs": self.loss_vhs,
            "loss_soft": self.loss_soft,
            "loss_total": self.loss_total,
        }
        if self.valid is not None:
            out["valid"] = self.valid.to_dict()
        return out


def train_epoch(model: KeypointRegressor, train_data: TrainingData, opt_state: AdamWState,
                schedule: CosineSchedule, epoch: int, soft_store: SoftLabelStore, *,
                batch_size: int = 16, accumulation_steps: int = 1, seed: int = 0,
                valid_data: TrainingData | None = None) -> EpochReport:
    """One pass over the labeled training set.

    Epochs are 1-indexed; epoch e trains at the scheduled rate for index
    e - 1, so the first epoch uses the peak rate. Dropout masks are drawn
    from per-sample streams keyed by (seed, epoch, sample id), which makes
    the parameter trajectory depend only on sample order, not on how the
    epoch was chunked into micro-batches. After the update pass the
    model's deterministic predictions are folded into ``soft_store``.
    """
    if train_data.labels is None:
        raise ConfigError("train_epoch needs labeled data")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if epoch < 1:
        raise ConfigError("epochs are 1-indexed")
    n = len(train_data)
    lr = schedule.lr_at(epoch - 1)
    order = derive_rng(seed, "shuffle", epoch).permutation(n)
    accumulator = GradientAccumulator(accumulation_steps)

    soft_all, soft_mask_all = (None, None)
    if epoch > SOFT_LABEL_START_EPOCH and len(soft_store):
        soft_all, soft_mask_all = soft_store.means_for(train_data.ids)

    sums = np.zeros(3)
    n_steps = 0

    def apply(mean_grad):
        nonlocal n_steps
        new_params = adamw_step(model.params, mean_grad, opt_state, lr, model.decay_mask)
        model.set_params(new_params)
        n_steps += 1

    for start in range(0, n, batch_size):
        idx = order[start: start + batch_size]
        ids = [train_data.ids[i] for i in idx]
        rngs = [derive_rng(seed, "dropout", epoch, sid) for sid in ids]
        preds = model.forward(train_data.images[idx], ForwardMode.TRAIN, sample_rngs=rngs)
        soft = None if soft_all is None else soft_all[idx]
        mask = None if soft_mask_all is None else soft_mask_all[idx]
        breakdown, grad_per_sample = composite_loss_batch(
            preds, train_data.labels[idx], epoch,
            soft=soft, soft_mask=mask, label_vhs=train_data.label_vhs[idx])
        grad = model.backward(grad_per_sample / len(idx))
        sums += np.array([breakdown.points_term, breakdown.vhs_term, breakdown.soft_term]) * len(idx)
        emitted = accumulator.add(grad)
        if emitted is not None:
            apply(emitted)
    leftover = accumulator.flush()
    if leftover is not None:
        apply(leftover)

    eval_preds = predict_batch(model, train_data.images)
    soft_store.update(train_data.ids, eval_preds)

    means = sums / n
    valid = evaluate(model, valid_data) if valid_data is not None else None
    return EpochReport(
        epoch=epoch, lr=lr, n_samples=n, n_steps=n_steps,
        loss_points=float(means[0]), loss_vhs=float(means[1]), loss_soft=float(means[2]),
        loss_total=float(means.sum()), valid=valid)
