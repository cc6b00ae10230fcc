"""Pose regressor model: training, inference and weight files."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DivergedError, FormatError, InvalidArgumentError
from ..geometry import IDENTITY_POSE, CameraGeometry, PoseParams, PoseRange, make_rng
from ..projector import DetectorImage, ProjectionConfig, normalize_minmax, render_drr
from . import network
from .inputs import InitializerVariant, build_input, channel_count, static_channels


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    n_train_samples: int = 2000
    optimizer: str = "adam"
    momentum: float = 0.9

    def __post_init__(self):
        for name in ("epochs", "batch_size", "n_train_samples"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise InvalidArgumentError("learning_rate must be positive")
        if self.seed < 0:
            raise InvalidArgumentError("seed must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidArgumentError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RegressorModel:
    variant: InitializerVariant
    params: dict[str, np.ndarray]
    pose_range: PoseRange
    seed: int = 0
    pe_frequencies: int = 1
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.variant = InitializerVariant(self.variant)
        expected = network.param_shapes(self.in_channels)
        for name, shape in expected.items():
            p = self.params.get(name)
            if p is None or p.shape != shape:
                raise InvalidArgumentError(
                    f"parameter {name}: expected shape {shape}, got {None if p is None else p.shape}"
                )
            if not np.all(np.isfinite(p)):
                raise InvalidArgumentError(f"parameter {name} has non-finite entries")

    @property
    def in_channels(self) -> int:
        return channel_count(self.variant, self.pe_frequencies)

    @classmethod
    def create(cls, variant, pose_range: PoseRange, seed: int = 0, pe_frequencies: int = 1, dtype=np.float32):
        variant = InitializerVariant(variant)
        params = network.init_params(channel_count(variant, pe_frequencies), make_rng(seed), dtype)
        return cls(variant, params, pose_range, seed, pe_frequencies)

    @classmethod
    def zeros(cls, variant, pose_range: PoseRange, pe_frequencies: int = 1):
        shapes = network.param_shapes(channel_count(variant, pe_frequencies))
        params = {k: np.zeros(s, dtype=np.float32) for k, s in shapes.items()}
        return cls(variant, params, pose_range, 0, pe_frequencies)

    def astype(self, dtype) -> "RegressorModel":
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        return RegressorModel(self.variant, params, self.pose_range, self.seed, self.pe_frequencies, dict(self.info))

    def predict_normalized(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1] != self.in_channels:
            raise InvalidArgumentError(
                f"{self.variant.value} expects {self.in_channels} input channels, got {x.shape[1]}"
            )
        dtype = self.params["fc.weight"].dtype
        return network.forward(self.params, x.astype(dtype, copy=False)).astype(np.float64)


def forward(model: RegressorModel, stack: np.ndarray) -> PoseParams:
    """Pose for one input stack (C, H, W): tanh output mapped through the model's pose range."""
    z = model.predict_normalized(stack)[0]
    return PoseParams.from_array(model.pose_range.denormalize(z))


# -- training -----------------------------------------------------------------


class _BatchBuilder:
    """Assembles input batches on the fly so the static channels are not duplicated per sample."""

    def __init__(self, variant, targets, ref_index, refs, pe_frequencies, dtype):
        self.variant = InitializerVariant(variant)
        self.targets = targets
        self.ref_index = ref_index
        self.refs = refs
        self.dtype = dtype
        rows, cols = targets.shape[1:]
        self.static = static_channels(self.variant, rows, cols, pe_frequencies).astype(dtype)

    def __call__(self, idx):
        t = self.targets[idx][:, None]
        if not self.variant.needs_reference:
            return t
        m = self.refs[self.ref_index[idx]][:, None]
        s = np.broadcast_to(self.static[None], (len(idx),) + self.static.shape)
        return np.concatenate([t, m, s], axis=1)


def _prepare(model, samples, references):
    dtype = model.params["fc.weight"].dtype
    targets = np.stack([normalize_minmax(s.target_image.data) for s in samples]).astype(dtype)
    y = model.pose_range.normalize(np.stack([s.theta_true.as_array() for s in samples])).astype(dtype)
    ref_ids = sorted({s.volume_id for s in samples})
    if model.variant.needs_reference:
        missing = [vid for vid in ref_ids if vid not in (references or {})]
        if missing:
            raise InvalidArgumentError(f"missing reference images for volumes {missing}")
        refs = np.stack([normalize_minmax(references[vid].data) for vid in ref_ids]).astype(dtype)
    else:
        refs = np.zeros((len(ref_ids),) + targets.shape[1:], dtype=dtype)
    pos = {vid: i for i, vid in enumerate(ref_ids)}
    ref_index = np.array([pos[s.volume_id] for s in samples])
    builder = _BatchBuilder(model.variant, targets, ref_index, refs, model.pe_frequencies, dtype)
    return builder, y


def train(model: RegressorModel, samples, cfg: TrainingConfig, references=None, log=None):
    """Mini-batch training on the MSE between normalized predicted and true poses.

    Returns the trained model (a new object) and the per-epoch mean training loss.
    ``references`` maps volume ids to neutral-pose DRRs (two-image variants only).
    """
    if not samples:
        raise InvalidArgumentError("training set is empty")
    model = model.astype(model.params["fc.weight"].dtype)
    builder, y = _prepare(model, samples, references)
    n = len(samples)
    rng = make_rng(cfg.seed)
    params = model.params
    state = {k: np.zeros_like(v) for k, v in params.items()}
    state2 = {k: np.zeros_like(v) for k, v in params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start : start + cfg.batch_size])
            loss, grads = network.loss_and_grads(params, builder(idx), y[idx])
            if not math.isfinite(loss):
                raise DivergedError(f"non-finite training loss in epoch {epoch}", trace)
            total += loss * len(idx)
            step += 1
            for k in params:
                g = grads[k].astype(params[k].dtype, copy=False)
                if cfg.optimizer == "sgd":
                    state[k] = cfg.momentum * state[k] - cfg.learning_rate * g
                    params[k] = params[k] + state[k]
                else:
                    state[k] = beta1 * state[k] + (1 - beta1) * g
                    state2[k] = beta2 * state2[k] + (1 - beta2) * g * g
                    mhat = state[k] / (1 - beta1**step)
                    vhat = state2[k] / (1 - beta2**step)
                    params[k] = params[k] - (cfg.learning_rate * mhat / (np.sqrt(vhat) + eps)).astype(params[k].dtype)
        trace.append(total / n)
        if log is not None:
            log(epoch, trace[-1])
    model.info = {"training": cfg.to_dict(), "final_loss": trace[-1], "n_samples": n}
    return model, trace


# -- inference ----------------------------------------------------------------


def predict_initial_pose(
    model: RegressorModel,
    target: DetectorImage,
    volume=None,
    cam: CameraGeometry | None = None,
    projection: ProjectionConfig | None = None,
    reference: DetectorImage | None = None,
) -> PoseParams:
    """Single-shot initial pose for ``target``.

    Two-image variants use the volume's DRR at the neutral pose as the moving
    image; pass ``reference`` to reuse a precomputed one.
    """
    if model.variant.needs_reference and reference is None:
        if volume is None:
            raise InvalidArgumentError(f"{model.variant.value} needs the volume or a reference image")
        reference = render_drr(volume, IDENTITY_POSE, cam or CameraGeometry(), projection)
    stack = build_input(model.variant, target, reference, model.pe_frequencies)
    return forward(model, stack)


def predict_many(model: RegressorModel, targets, references=None) -> list[PoseParams]:
    """Batched variant of :func:`predict_initial_pose` for precomputed references."""
    out = []
    refs = references if references is not None else [None] * len(targets)
    for t, r in zip(targets, refs):
        stack = build_input(model.variant, t, r, model.pe_frequencies)
        out.append(forward(model, stack))
    return out


# -- weight files -------------------------------------------------------------
# layout: b"RGIW" | uint32 version | uint64 header length | JSON header | float32 LE payload
# payload order: network.param_names(), each array C-order

_MAGIC = b"RGIW"
_VERSION = 1


def save_model(model: RegressorModel, path, provenance: dict | None = None) -> Path:
    header = {
        "variant": model.variant.value,
        "architecture": {
            "conv_widths": list(network.CONV_WIDTHS),
            "kernel": network.KERNEL,
            "stride": network.STRIDE,
            "padding": network.PADDING,
            "pooling": "global_average",
            "fc_outputs": network.N_OUTPUTS,
            "output_activation": "tanh",
        },
        "in_channels": model.in_channels,
        "pe_frequencies": model.pe_frequencies,
        "pose_range": model.pose_range.to_dict(),
        "seed": model.seed,
        "layer_order": network.param_names(),
        "shapes": {k: list(v.shape) for k, v in model.params.items()},
        "info": model.info,
        "provenance": provenance or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.asarray(model.params[k], dtype="<f4").tobytes() for k in network.param_names())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_MAGIC + struct.pack("<IQ", _VERSION, len(blob)) + blob + payload)
    return path


def load_model(path) -> RegressorModel:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _MAGIC or len(raw) < 16:
        raise FormatError(f"{path}: not a model weight file")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported weight file version {version}")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    shapes = network.param_shapes(channel_count(header["variant"], header["pe_frequencies"]))
    payload = raw[16 + hlen :]
    expected = sum(int(np.prod(s)) for s in shapes.values()) * 4
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    params, off = {}, 0
    for name in network.param_names():
        size = int(np.prod(shapes[name]))
        params[name] = np.frombuffer(payload, dtype="<f4", count=size, offset=off * 4).reshape(shapes[name]).copy()
        off += size
    return RegressorModel(
        header["variant"],
        params,
        PoseRange.from_dict(header["pose_range"]),
        int(header["seed"]),
        int(header["pe_frequencies"]),
        header.get("info", {}),
    )
