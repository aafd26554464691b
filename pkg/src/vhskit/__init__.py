"""Semi-supervised keypoint regression for vertebral heart scoring."""

from .errors import (ConfigError, DataError, DegenerateVertebraError,
                     GeometryError, InvalidScoreError, NumericError,
                     ParseError, ScheduleError, ShapeError, SnapshotError,
                     StateError, ValidationError, VhskitError)
from .geometry import (EF_EPSILON, LARGE_MIN, SMALL_MAX, VHS_FACTOR,
                       HeartClass, Keypoint, KeypointSet, calc_vhs, classify,
                       classify_batch, distance, vhs_and_class, vhs_batch,
                       vhs_batch_with_grad, vhs_from_flat)
from .model import (DEFAULT_HIDDEN, ForwardMode, KeypointRegressor, LayerSpec,
                    ModelConfig, ModelSnapshot, count_params, load_snapshot,
                    predict_batch, save_snapshot)
from .optim import AdamWState, CosineSchedule, GradientAccumulator, adamw_step
from .training import (SOFT_LABEL_START_EPOCH, EpochReport, EvalReport,
                       LossBreakdown, SoftLabelStore, TrainingData,
                       composite_loss, composite_loss_batch, confusion_matrix,
                       evaluate, train_epoch)
from .pseudo import (McConfig, McPoolStats, McStats, PseudoSample, RoundReport,
                     mc_predict, mc_predict_pool, pool_seed, pseudo_total_loss,
                     run_pseudo_rounds, select_confident)
from .data import (AnnotationRecord, Dataset, LoadReport, Sample,
                   load_dataset, save_dataset, split_dataset,
                   update_annotation)
from .phantoms import (PhantomSpec, generate_phantoms, make_phantom_bundle,
                       phantom_keypoints, random_phantom_specs, render_phantom)
from .rng import derive_rng, derive_seed
from .commands import (RunConfig, RunManifest, cmd_eval, cmd_phantoms,
                       cmd_pseudo, cmd_train)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
