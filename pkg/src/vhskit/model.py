"""A small conv/dense keypoint regressor with explicit reverse-mode gradients.

Parameters live in a single flat float64 vector with named per-layer
offsets; layers operate on strided views, so the optimizer can treat the
model as a plain vector function. Dropout uses inverted scaling (divide by
1 - p at train time), which keeps the deterministic eval path a plain
forward pass and makes the expectation over masks of each dropped layer
equal its undropped output.

Convolutions are fixed at 3x3 kernel, stride 2, padding 1; capacity is
controlled by the layer widths in the config.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, SnapshotError, StateError

CONV_KERNEL = 3
CONV_STRIDE = 2
CONV_PAD = 1
OUTPUT_DIM = 12

ACTIVATIONS = ("relu", "tanh", "identity")

SNAPSHOT_MAGIC = b"VHSNAP01"
SNAPSHOT_VERSION = 1


class ForwardMode(enum.Enum):
    """How a forward pass behaves.

    TRAIN: dropout active, tape recorded so backward() can run.
    EVAL:  dropout off; a pure function of (parameters, input).
    MC:    dropout active, no tape; used for stochastic inference.
    """

    TRAIN = "train"
    EVAL = "eval"
    MC = "mc"


@dataclass(frozen=True)
class LayerSpec:
    """One hidden layer: conv (channels) or dense (units), plus activation
    and whether a dropout stage follows it."""

    kind: str
    width: int
    activation: str = "relu"
    dropout: bool = True

    def __post_init__(self):
        if self.kind not in ("conv", "dense"):
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and self.width < 1 or self.kind == "dense" and self.width < 1:
            raise ConfigError("layer width must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


DEFAULT_HIDDEN = (
    LayerSpec("conv", 8),
    LayerSpec("conv", 16),
    LayerSpec("conv", 32),
    LayerSpec("dense", 64, dropout=False),
)


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    hidden: tuple[LayerSpec, ...] = DEFAULT_HIDDEN
    dropout_rate: float = 0.2
    output_dim: int = OUTPUT_DIM

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.output_dim != OUTPUT_DIM:
            raise ConfigError(f"output_dim is fixed at {OUTPUT_DIM} (six keypoints x two coordinates)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.input_size < 4:
            raise ConfigError("input_size must be at least 4 pixels")
        if not any(spec.dropout for spec in self.hidden):
            raise ConfigError("at least one dropout-bearing layer is required for MC inference")
        seen_dense = False
        for spec in self.hidden:
            if spec.kind == "dense":
                seen_dense = True
            elif seen_dense:
                raise ConfigError("conv layer cannot follow a dense layer")

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "dropout_rate": self.dropout_rate,
            "output_dim": self.output_dim,
            "hidden": [
                {"kind": s.kind, "width": s.width, "activation": s.activation, "dropout": s.dropout}
                for s in self.hidden
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        hidden = tuple(
            LayerSpec(h["kind"], int(h["width"]), h.get("activation", "relu"), bool(h.get("dropout", True)))
            for h in data.get("hidden", [])
        ) or DEFAULT_HIDDEN
        return cls(
            input_size=int(data.get("input_size", 64)),
            hidden=hidden,
            dropout_rate=float(data.get("dropout_rate", 0.2)),
            output_dim=int(data.get("output_dim", OUTPUT_DIM)),
        )


@dataclass
class ModelSnapshot:
    """Everything needed to rebuild a regressor bit-exactly."""

    config: ModelConfig
    parameters: np.ndarray
    rng_state: dict = field(default_factory=dict)
    epoch: int = 0


@dataclass(frozen=True)
class _LayerPlan:
    spec: LayerSpec | None  # None marks the output head
    kind: str
    w_offset: int
    w_shape: tuple
    b_offset: int
    b_shape: tuple
    fan_in: int
    in_shape: tuple  # (C, H, W) for conv input, (n,) for dense input
    out_shape: tuple


def _conv_out(size: int) -> int:
    return (size + 2 * CONV_PAD - CONV_KERNEL) // CONV_STRIDE + 1


def _build_plan(config: ModelConfig) -> tuple[list[_LayerPlan], int]:
    plans: list[_LayerPlan] = []
    shape: tuple = (1, config.input_size, config.input_size)
    offset = 0
    for spec in config.hidden:
        if spec.kind == "conv":
            if len(shape) != 3:
                raise ConfigError("conv layer cannot follow a dense layer")
            c_in, h, w = shape
            fan_in = c_in * CONV_KERNEL * CONV_KERNEL
            w_shape = (fan_in, spec.width)
            out_shape = (spec.width, _conv_out(h), _conv_out(w))
            if out_shape[1] < 1 or out_shape[2] < 1:
                raise ConfigError("feature map collapsed below 1 pixel; too many conv layers")
        else:
            n_in = int(np.prod(shape))
            fan_in = n_in
            w_shape = (n_in, spec.width)
            out_shape = (spec.width,)
        b_shape = (spec.width,)
        w_off = offset
        offset += int(np.prod(w_shape))
        b_off = offset
        offset += spec.width
        plans.append(_LayerPlan(spec, spec.kind, w_off, w_shape, b_off, b_shape, fan_in, shape, out_shape))
        shape = out_shape
    n_in = int(np.prod(shape))
    w_shape = (n_in, config.output_dim)
    plans.append(
        _LayerPlan(None, "dense", offset, w_shape, offset + n_in * config.output_dim,
                   (config.output_dim,), n_in, shape, (config.output_dim,))
    )
    total = offset + n_in * config.output_dim + config.output_dim
    return plans, total


def count_params(config: ModelConfig) -> int:
    return _build_plan(config)[1]


def _im2col(x_pad: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (B, out_h*out_w, C*9) patch matrix for 3x3 stride-2 conv."""
    b, c = x_pad.shape[:2]
    cols = np.empty((b, c, CONV_KERNEL, CONV_KERNEL, out_h, out_w), dtype=np.float64)
    for ki in range(CONV_KERNEL):
        for kj in range(CONV_KERNEL):
            cols[:, :, ki, kj] = x_pad[
                :, :,
                ki: ki + CONV_STRIDE * out_h: CONV_STRIDE,
                kj: kj + CONV_STRIDE * out_w: CONV_STRIDE,
            ]
    return cols.reshape(b, c * CONV_KERNEL * CONV_KERNEL, out_h * out_w).transpose(0, 2, 1)


def _col2im(dcols: np.ndarray, in_shape: tuple, out_h: int, out_w: int) -> np.ndarray:
    """Adjoint of _im2col: scatter (B, P, C*9) patch grads back onto the input."""
    b = dcols.shape[0]
    c, h, w = in_shape
    d6 = dcols.transpose(0, 2, 1).reshape(b, c, CONV_KERNEL, CONV_KERNEL, out_h, out_w)
    dx_pad = np.zeros((b, c, h + 2 * CONV_PAD, w + 2 * CONV_PAD), dtype=np.float64)
    for ki in range(CONV_KERNEL):
        for kj in range(CONV_KERNEL):
            dx_pad[
                :, :,
                ki: ki + CONV_STRIDE * out_h: CONV_STRIDE,
                kj: kj + CONV_STRIDE * out_w: CONV_STRIDE,
            ] += d6[:, :, ki, kj]
    return dx_pad[:, :, CONV_PAD: CONV_PAD + h, CONV_PAD: CONV_PAD + w]


def _activate(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    return x


def _activate_grad(name: str, pre: np.ndarray, post: np.ndarray, dout: np.ndarray) -> np.ndarray:
    if name == "relu":
        return dout * (pre > 0.0)
    if name == "tanh":
        return dout * (1.0 - post * post)
    return dout


class KeypointRegressor:
    """Differentiable keypoint regressor over square grayscale images."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None,
                 params: np.ndarray | None = None):
        self.config = config
        self._plans, self.n_params = _build_plan(config)
        self._params = np.zeros(self.n_params, dtype=np.float64)
        self._tape = None
        if params is not None:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != (self.n_params,):
                raise ShapeError(f"expected {self.n_params} parameters, got shape {params.shape}")
            self._params[:] = params
        elif rng is not None:
            self._init_params(rng)
        else:
            raise ConfigError("provide either an init rng or a parameter vector")
        mask = np.zeros(self.n_params, dtype=np.float64)
        for plan in self._plans:
            w_size = int(np.prod(plan.w_shape))
            mask[plan.w_offset: plan.w_offset + w_size] = 1.0
        self.decay_mask = mask  # 1 for weights, 0 for biases; decay skips biases

    def _init_params(self, rng: np.random.Generator):
        # fan-in scaled uniform init, same bound for weights and biases;
        # the output head biases start at 0.5 so initial coordinate
        # predictions sit mid-frame instead of near 0, which keeps every
        # output within reach of its target under a decaying step size
        for plan in self._plans:
            bound = 1.0 / np.sqrt(plan.fan_in)
            w_size = int(np.prod(plan.w_shape))
            self._params[plan.w_offset: plan.w_offset + w_size] = rng.uniform(-bound, bound, w_size)
            b_size = int(np.prod(plan.b_shape))
            if plan.spec is None:
                self._params[plan.b_offset: plan.b_offset + b_size] = 0.5
            else:
                self._params[plan.b_offset: plan.b_offset + b_size] = rng.uniform(-bound, bound, b_size)

    @property
    def params(self) -> np.ndarray:
        """The live flat parameter vector (mutating it mutates the model)."""
        return self._params

    def set_params(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got shape {values.shape}")
        self._params[:] = values

    def _weight(self, plan: _LayerPlan) -> np.ndarray:
        size = int(np.prod(plan.w_shape))
        return self._params[plan.w_offset: plan.w_offset + size].reshape(plan.w_shape)

    def _bias(self, plan: _LayerPlan) -> np.ndarray:
        return self._params[plan.b_offset: plan.b_offset + plan.b_shape[0]]

    def _coerce_images(self, images: np.ndarray) -> tuple[np.ndarray, bool]:
        arr = np.asarray(images, dtype=np.float64)
        s = self.config.input_size
        single = False
        if arr.shape == (s, s):
            arr = arr[None, None]
            single = True
        elif arr.shape[1:] == (s, s) and arr.ndim == 3:
            arr = arr[:, None]
        elif arr.ndim == 4 and arr.shape[1:] == (1, s, s):
            pass
        else:
            raise ShapeError(f"expected images shaped ({s}, {s}) with optional batch/channel axes, got {arr.shape}")
        return arr, single

    def _dropout_masks_needed(self, mode: ForwardMode) -> bool:
        return mode in (ForwardMode.TRAIN, ForwardMode.MC) and self.config.dropout_rate > 0.0

    def forward(self, images: np.ndarray, mode: ForwardMode = ForwardMode.EVAL,
                rng: np.random.Generator | None = None,
                sample_rngs: list[np.random.Generator] | None = None) -> np.ndarray:
        """Run the network; returns (B, 12) predictions (or (12,) for one image).

        Dropout draws either one mask per batch from ``rng`` or one mask per
        sample from ``sample_rngs``; per-sample streams decouple the masks a
        sample sees from how the pool was batched. (Floating-point sums may
        still differ in the last bits across batch shapes; fixed shapes are
        bit-deterministic.)
        """
        x, single = self._coerce_images(images)
        batch = x.shape[0]
        rate = self.config.dropout_rate
        use_dropout = self._dropout_masks_needed(mode)
        if use_dropout:
            if (rng is None) == (sample_rngs is None):
                raise ValueError("stochastic modes need exactly one of rng or sample_rngs")
            if sample_rngs is not None and len(sample_rngs) != batch:
                raise ShapeError(f"got {len(sample_rngs)} sample rngs for a batch of {batch}")

        record = mode == ForwardMode.TRAIN
        tape = [] if record else None

        def draw_mask(shape_per_sample: tuple) -> np.ndarray:
            keep = 1.0 - rate
            if sample_rngs is not None:
                u = np.stack([g.random(shape_per_sample) for g in sample_rngs])
            else:
                u = rng.random((batch,) + shape_per_sample)
            return (u >= rate).astype(np.float64) / keep

        for plan in self._plans:
            entry = {"plan": plan, "x": x if record else None}
            if plan.kind == "conv":
                c, h, w = plan.in_shape
                out_c, out_h, out_w = plan.out_shape
                x_pad = np.pad(x, ((0, 0), (0, 0), (CONV_PAD, CONV_PAD), (CONV_PAD, CONV_PAD)))
                cols = _im2col(x_pad, out_h, out_w)
                pre = cols @ self._weight(plan) + self._bias(plan)
                pre = pre.transpose(0, 2, 1).reshape(batch, out_c, out_h, out_w)
                if record:
                    entry["cols"] = cols
            else:
                flat_in = x.reshape(batch, -1)
                pre = flat_in @ self._weight(plan) + self._bias(plan)
                if record:
                    entry["flat_in"] = flat_in
            if plan.spec is None:
                x = pre  # linear output head, no activation or dropout
                if record:
                    entry["pre"] = pre
                    tape.append(entry)
                break
            post = _activate(plan.spec.activation, pre)
            mask = None
            if plan.spec.dropout and use_dropout:
                mask = draw_mask(post.shape[1:])
                out = post * mask
            else:
                out = post
            if record:
                entry["pre"] = pre
                entry["post"] = post
                entry["mask"] = mask
                tape.append(entry)
            x = out

        if record:
            self._tape = {"layers": tape, "batch": batch}
        return x[0] if single else x

    def backward(self, grad_outputs: np.ndarray) -> np.ndarray:
        """Parameter gradient for the last TRAIN forward; consumes the tape."""
        if self._tape is None:
            raise StateError("backward requires a recorded TRAIN-mode forward pass")
        tape = self._tape
        self._tape = None
        batch = tape["batch"]
        dy = np.asarray(grad_outputs, dtype=np.float64)
        if dy.shape == (self.config.output_dim,) and batch == 1:
            dy = dy[None]
        if dy.shape != (batch, self.config.output_dim):
            raise ShapeError(f"expected output gradient of shape ({batch}, {self.config.output_dim}), got {dy.shape}")

        grad = np.zeros(self.n_params, dtype=np.float64)
        dx = dy
        for entry in reversed(tape["layers"]):
            plan = entry["plan"]
            if plan.spec is not None:
                if entry["mask"] is not None:
                    dx = dx * entry["mask"]
                dx = _activate_grad(plan.spec.activation, entry["pre"], entry.get("post"), dx)
            if plan.kind == "conv":
                out_c, out_h, out_w = plan.out_shape
                dflat = dx.reshape(batch, out_c, out_h * out_w).transpose(0, 2, 1)
                cols = entry["cols"]
                w_size = int(np.prod(plan.w_shape))
                grad[plan.w_offset: plan.w_offset + w_size] = np.einsum(
                    "bpc,bpf->cf", cols, dflat, optimize=True).reshape(-1)
                grad[plan.b_offset: plan.b_offset + plan.b_shape[0]] = dflat.sum(axis=(0, 1))
                dcols = dflat @ self._weight(plan).T
                dx = _col2im(dcols, plan.in_shape, out_h, out_w)
            else:
                flat_in = entry["flat_in"]
                w_size = int(np.prod(plan.w_shape))
                grad[plan.w_offset: plan.w_offset + w_size] = (flat_in.T @ dx).reshape(-1)
                grad[plan.b_offset: plan.b_offset + plan.b_shape[0]] = dx.sum(axis=0)
                dx = (dx @ self._weight(plan).T).reshape((batch,) + plan.in_shape)
        return grad

    def snapshot(self, epoch: int = 0, rng_state: dict | None = None) -> ModelSnapshot:
        return ModelSnapshot(self.config, self._params.copy(), rng_state or {}, epoch)

    @classmethod
    def from_snapshot(cls, snap: ModelSnapshot) -> "KeypointRegressor":
        return cls(snap.config, params=snap.parameters)


def predict_batch(model: KeypointRegressor, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Deterministic predictions for (N, 1, S, S) images, chunked for memory."""
    outs = [model.forward(images[i: i + chunk], ForwardMode.EVAL) for i in range(0, len(images), chunk)]
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, OUTPUT_DIM))


def save_snapshot(snap: ModelSnapshot, path) -> None:
    """Write a snapshot: magic, versioned JSON header, little-endian f8 params."""
    header = {
        "format": "vhskit-snapshot",
        "version": SNAPSHOT_VERSION,
        "config": snap.config.to_dict(),
        "epoch": snap.epoch,
        "rng_state": snap.rng_state,
        "param_count": int(snap.parameters.shape[0]),
        "dtype": "<f8",
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = snap.parameters.astype("<f8").tobytes()
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        fh.write(payload)
    os.replace(tmp, path)


def load_snapshot(path) -> ModelSnapshot:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise SnapshotError(f"cannot read snapshot {path}: {exc}") from exc
    if len(blob) < len(SNAPSHOT_MAGIC) + 8 or blob[: len(SNAPSHOT_MAGIC)] != SNAPSHOT_MAGIC:
        raise SnapshotError(
            f"{path} is not a snapshot file (bad magic; expected format "
            f"{SNAPSHOT_MAGIC.decode('ascii')} version {SNAPSHOT_VERSION})")
    off = len(SNAPSHOT_MAGIC)
    header_len = int.from_bytes(blob[off: off + 8], "little")
    off += 8
    try:
        header = json.loads(blob[off: off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SnapshotError(f"{path}: corrupt snapshot header ({exc})") from exc
    if header.get("version") != SNAPSHOT_VERSION:
        raise SnapshotError(
            f"{path}: unsupported snapshot version {header.get('version')!r}, expected {SNAPSHOT_VERSION}"
        )
    off += header_len
    count = int(header["param_count"])
    expected = count * 8
    payload = blob[off: off + expected]
    if len(payload) != expected:
        raise SnapshotError(f"{path}: truncated parameter payload ({len(payload)} of {expected} bytes)")
    params = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    config = ModelConfig.from_dict(header["config"])
    if count_params(config) != count:
        raise SnapshotError(f"{path}: parameter count {count} does not match the stored config")
    return ModelSnapshot(config, params, header.get("rng_state", {}), int(header.get("epoch", 0)))
