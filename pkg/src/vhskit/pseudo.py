"""Monte Carlo dropout inference and confidence-filtered pseudo-labeling.

The model keeps its dropout masks active at inference and is run K times
per image; the per-coordinate mean is the prediction and the
per-coordinate population spread estimates uncertainty. An image joins
the confident set when its worst coordinate spread stays strictly below
a threshold, and the mean becomes its training target for the next
retraining block.

Retraining warm-starts from the given model and alternates labeled and
pseudo micro-batches. Labeled batches use the full composite loss from
the supervised loop (with a fresh soft-label history and epoch numbering
restarting at 1); pseudo batches contribute a plain coordinate L1 toward
their generated targets, scaled by lambda and added per step. Gradients
never mix batches, so with lambda = 0 or an empty confident set the
parameter trajectory is exactly that of supervised training on the
labeled set alone. Human annotations are never replaced; pool entries
that collide with a labeled id are dropped up front.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import KeypointSet
from .model import ForwardMode, KeypointRegressor, predict_batch
from .optim import AdamWState, CosineSchedule, GradientAccumulator, adamw_step
from .rng import derive_rng, derive_seed
from .training import (EvalReport, SoftLabelStore, TrainingData, composite_loss_batch,
                       evaluate, SOFT_LABEL_START_EPOCH)


@dataclass(frozen=True)
class McConfig:
    """Knobs for stochastic inference and pseudo-label retraining."""

    k_passes: int = 20
    tau: float = 0.005
    lam: float = 1.0
    refresh_every: int = 1

    def __post_init__(self):
        if self.k_passes < 2:
            raise ConfigError("k_passes must be >= 2 to estimate spread")
        if self.tau < 0.0:
            raise ConfigError("tau must be non-negative")
        if self.lam < 0.0:
            raise ConfigError("lam must be non-negative")
        if self.refresh_every < 1:
            raise ConfigError("refresh_every must be >= 1")

    def to_dict(self) -> dict:
        return {"k_passes": self.k_passes, "tau": self.tau, "lam": self.lam,
                "refresh_every": self.refresh_every}

    @classmethod
    def from_dict(cls, data: dict) -> "McConfig":
        return cls(
            k_passes=int(data.get("k_passes", 20)),
            tau=float(data.get("tau", 0.005)),
            lam=float(data.get("lam", 1.0)),
            refresh_every=int(data.get("refresh_every", 1)),
        )


@dataclass(frozen=True)
class McStats:
    """Mean and per-coordinate population spread over K stochastic passes."""

    mu: np.ndarray  # (12,)
    sigma: np.ndarray  # (12,)

    @property
    def max_sigma(self) -> float:
        return float(np.max(self.sigma))


def mc_predict(model: KeypointRegressor, image: np.ndarray, k_passes: int, seed: int,
               return_passes: bool = False):
    """K stochastic passes over one image.

    Pass k draws its masks from a stream keyed (seed, k), so the result
    does not depend on any other randomness in flight. With the dropout
    rate at zero the passes coincide and sigma is identically zero.
    """
    if k_passes < 2:
        raise ConfigError("k_passes must be >= 2")
    if model.config.dropout_rate == 0.0:
        warnings.warn("dropout rate is 0; all stochastic passes are identical")
    s = model.config.input_size
    image = np.asarray(image, dtype=np.float64)
    single = image.reshape(1, s, s)
    batch = np.broadcast_to(single[None], (k_passes, 1, s, s))
    rngs = [derive_rng(seed, "pass", k) for k in range(k_passes)]
    outs = model.forward(batch, ForwardMode.MC, sample_rngs=rngs)
    mu = outs.mean(axis=0)
    # divisor K: spread of the passes themselves. Coordinates on which all
    # passes agree bitwise have exactly zero spread; the guard keeps the
    # rounding of the mean from leaking in.
    sigma = np.where(np.ptp(outs, axis=0) == 0.0, 0.0, outs.std(axis=0))
    stats = McStats(mu, sigma)
    return (stats, outs) if return_passes else stats


@dataclass(frozen=True)
class McPoolStats:
    ids: list[str]
    mu: np.ndarray  # (N, 12)
    sigma: np.ndarray  # (N, 12)
    max_sigma: np.ndarray  # (N,)


def pool_seed(master_seed: int, sample_id: str) -> int:
    """The per-image seed used for pool scoring; pass k of image x then
    draws from a stream keyed (master seed, x, k), fixed across rounds."""
    return derive_seed(master_seed, "mc", sample_id)


def mc_predict_pool(model: KeypointRegressor, images: np.ndarray, ids, k_passes: int,
                    sample_seeds, chunk: int = 256) -> McPoolStats:
    """MC statistics for a pool of images, one seed per sample.

    Batching changes the order of work but never a dropout mask, so the
    statistics match per-image mc_predict calls to float precision. For a
    fixed pool and chunk size the result is bit-reproducible.
    """
    n = len(ids)
    if len(sample_seeds) != n or images.shape[0] != n:
        raise ConfigError("ids, images, and sample_seeds must align")
    if n == 0:
        return McPoolStats([], np.zeros((0, 12)), np.zeros((0, 12)), np.zeros(0))
    passes = np.empty((n, k_passes, 12))
    for k in range(k_passes):
        for start in range(0, n, chunk):
            stop = min(start + chunk, n)
            rngs = [derive_rng(sample_seeds[i], "pass", k) for i in range(start, stop)]
            passes[start:stop, k] = model.forward(images[start:stop], ForwardMode.MC,
                                                  sample_rngs=rngs)
    mu = passes.mean(axis=1)
    sigma = np.where(np.ptp(passes, axis=1) == 0.0, 0.0, passes.std(axis=1))
    return McPoolStats(list(ids), mu, sigma, sigma.max(axis=1))


def select_confident(stats: McPoolStats, tau: float) -> list[int]:
    """Pool indices whose worst coordinate spread is strictly below tau."""
    return [int(i) for i in np.flatnonzero(stats.max_sigma < tau)]


def pseudo_total_loss(labeled_losses, pseudo_losses, lam: float) -> float:
    """mean(labeled) + lam * mean(pseudo); the pseudo side may be empty."""
    labeled_losses = np.asarray(labeled_losses, dtype=np.float64)
    pseudo_losses = np.asarray(pseudo_losses, dtype=np.float64)
    if labeled_losses.size == 0 and pseudo_losses.size == 0:
        raise ConfigError("no losses to combine")
    total = 0.0
    if labeled_losses.size:
        total += float(np.mean(labeled_losses))
    if pseudo_losses.size:
        total += lam * float(np.mean(pseudo_losses))
    return total


@dataclass(frozen=True)
class PseudoSample:
    """One admitted pool image with its generated target."""

    id: str
    points: KeypointSet
    max_sigma: float
    round_index: int


@dataclass
class RoundReport:
    round_index: int
    epochs: list[int]
    n_pool: int
    n_confident: int
    mean_max_sigma: float  # over admitted samples; nan when none admitted
    pool_mean_max_sigma: float  # over the whole pool; nan when pool empty
    labeled_loss: float  # mean composite total over the block's labeled batches
    pseudo_loss: float  # mean plain L1 over pseudo batches; nan when none ran
    admitted: list[PseudoSample] = field(default_factory=list)
    valid: EvalReport | None = None

    def to_dict(self) -> dict:
        out = {
            "round_index": self.round_index,
            "epochs": self.epochs,
            "n_pool": self.n_pool,
            "n_confident": self.n_confident,
            "mean_max_sigma": self.mean_max_sigma,
            "pool_mean_max_sigma": self.pool_mean_max_sigma,
            "labeled_loss": self.labeled_loss,
            "pseudo_loss": self.pseudo_loss,
            "admitted_ids": [p.id for p in self.admitted],
        }
        if self.valid is not None:
            out["valid"] = self.valid.to_dict()
        return out


def _plain_l1_grads(preds: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean coordinate L1 over the batch and its gradient w.r.t. preds."""
    diff = preds - targets
    loss = float(np.mean(np.abs(diff)))
    return loss, np.sign(diff) / (12.0 * preds.shape[0])


def run_pseudo_rounds(model: KeypointRegressor, labeled: TrainingData,
                      unlabeled: TrainingData | None, mc: McConfig, *,
                      epochs: int, opt_state: AdamWState, schedule: CosineSchedule,
                      batch_size: int = 16, accumulation_steps: int = 1, seed: int = 0,
                      valid_data: TrainingData | None = None,
                      soft_window: int | None = None) -> list[RoundReport]:
    """Confidence-filtered self-training, warm-starting from ``model``.

    Every ``mc.refresh_every`` epochs the pool is re-scored with the
    current weights and the confident set rebuilt from scratch. Epoch
    numbering, the soft-label history, and the optimizer state all start
    fresh, so the labeled side replays the supervised loop exactly; the
    pseudo side rides along as an additive per-step gradient.
    """
    if labeled.labels is None:
        raise ConfigError("labeled split must carry annotations")
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")

    labeled_ids = set(labeled.ids)
    if unlabeled is not None and len(unlabeled):
        keep = [i for i, sid in enumerate(unlabeled.ids) if sid not in labeled_ids]
        if len(keep) != len(unlabeled):
            warnings.warn(f"dropping {len(unlabeled) - len(keep)} pool entries that shadow labeled ids")
        pool = unlabeled.subset(keep) if keep else None
    else:
        pool = None
    if pool is None:
        warnings.warn("unlabeled pool is empty; continuing with supervised training only")
    n_pool = 0 if pool is None else len(pool)
    pool_seeds = [] if pool is None else [pool_seed(seed, sid) for sid in pool.ids]

    n = len(labeled)
    soft_store = SoftLabelStore(window=soft_window)
    reports: list[RoundReport] = []
    current: RoundReport | None = None
    pseudo_targets = np.zeros((0, 12))
    pseudo_idx: list[int] = []
    lab_sums = np.zeros(2)  # weighted loss sum, weight
    pse_sums = np.zeros(2)

    def close_round():
        current.labeled_loss = float(lab_sums[0] / lab_sums[1]) if lab_sums[1] else float("nan")
        current.pseudo_loss = float(pse_sums[0] / pse_sums[1]) if pse_sums[1] else float("nan")
        current.valid = evaluate(model, valid_data) if valid_data is not None else None
        reports.append(current)
        lab_sums[:] = 0.0
        pse_sums[:] = 0.0

    for epoch in range(1, epochs + 1):
        if (epoch - 1) % mc.refresh_every == 0:
            if current is not None:
                close_round()
            round_index = (epoch - 1) // mc.refresh_every
            admitted: list[PseudoSample] = []
            pseudo_idx = []
            pool_spread = float("nan")
            if pool is not None:
                stats = mc_predict_pool(model, pool.images, pool.ids, mc.k_passes, pool_seeds)
                pool_spread = float(np.mean(stats.max_sigma))
                pseudo_idx = select_confident(stats, mc.tau)
                pseudo_targets = stats.mu[pseudo_idx]
                admitted = [
                    PseudoSample(pool.ids[i],
                                 KeypointSet.from_flat(stats.mu[i], validate_range=False),
                                 float(stats.max_sigma[i]), round_index)
                    for i in pseudo_idx
                ]
            current = RoundReport(
                round_index=round_index, epochs=[], n_pool=n_pool,
                n_confident=len(pseudo_idx),
                mean_max_sigma=float(np.mean([p.max_sigma for p in admitted])) if admitted else float("nan"),
                pool_mean_max_sigma=pool_spread,
                labeled_loss=float("nan"), pseudo_loss=float("nan"), admitted=admitted)

        current.epochs.append(epoch)
        lr = schedule.lr_at(epoch - 1)
        order = derive_rng(seed, "shuffle", epoch).permutation(n)
        use_pseudo = mc.lam != 0.0 and len(pseudo_idx) > 0
        if use_pseudo:
            p_order = derive_rng(seed, "pseudo-shuffle", epoch).permutation(len(pseudo_idx))
            p_size = min(batch_size, len(pseudo_idx))
            cursor = 0
        accumulator = GradientAccumulator(accumulation_steps)

        soft_all, soft_mask_all = (None, None)
        if epoch > SOFT_LABEL_START_EPOCH and len(soft_store):
            soft_all, soft_mask_all = soft_store.means_for(labeled.ids)

        for start in range(0, n, batch_size):
            idx = order[start: start + batch_size]
            ids = [labeled.ids[i] for i in idx]
            rngs = [derive_rng(seed, "dropout", epoch, sid) for sid in ids]
            preds = model.forward(labeled.images[idx], ForwardMode.TRAIN, sample_rngs=rngs)
            soft = None if soft_all is None else soft_all[idx]
            mask = None if soft_mask_all is None else soft_mask_all[idx]
            breakdown, grad_per_sample = composite_loss_batch(
                preds, labeled.labels[idx], epoch,
                soft=soft, soft_mask=mask, label_vhs=labeled.label_vhs[idx])
            grad = model.backward(grad_per_sample / len(idx))
            lab_sums += (breakdown.total * len(idx), len(idx))

            if use_pseudo:
                sel = [p_order[(cursor + j) % len(p_order)] for j in range(p_size)]
                cursor = (cursor + p_size) % len(p_order)
                rows = [pseudo_idx[s] for s in sel]
                p_ids = [pool.ids[r] for r in rows]
                p_rngs = [derive_rng(seed, "dropout", epoch, sid) for sid in p_ids]
                p_preds = model.forward(pool.images[rows], ForwardMode.TRAIN, sample_rngs=p_rngs)
                p_loss, p_dpred = _plain_l1_grads(p_preds, pseudo_targets[sel])
                grad = grad + mc.lam * model.backward(p_dpred)
                pse_sums += (p_loss * len(rows), len(rows))

            emitted = accumulator.add(grad)
            if emitted is not None:
                model.set_params(adamw_step(model.params, emitted, opt_state, lr, model.decay_mask))
        leftover = accumulator.flush()
        if leftover is not None:
            model.set_params(adamw_step(model.params, leftover, opt_state, lr, model.decay_mask))

        eval_preds = predict_batch(model, labeled.images)
        soft_store.update(labeled.ids, eval_preds)

    close_round()
    return reports
