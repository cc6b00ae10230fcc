"""Run configuration: one YAML file, every default spelled out, flags on top.

Schema (all keys optional; missing keys take the defaults below)::

    seed: 0                      # root seed; subsystem seeds are derived from it
    output_dir: runs/default
    threads: 1
    similarity: grad_ncc         # ncc | grad_ncc
    noise_sigma: 0.0             # Gaussian pixel noise added to target images
    naive_init: identity         # identity | random (sensitivity mode)
    camera:      {source_to_detector_mm: 1020, source_to_iso_mm: 800,
                  detector_rows: 128, detector_cols: 128, pixel_spacing_mm: 2.176}
    projection:  {n_samples_per_ray: 256, normalize_output: true}
    optimizer:   {lr_rot_deg: 30.0, lr_trans_mm: 100.0, momentum: 0.8,
                  fd_step_rot_deg: 0.1, fd_step_trans_mm: 0.5, max_iters: 300,
                  conv_tol: 1e-5, conv_window: 10, conv_abs_loss: 1e-4,
                  axis_gains: [5, 5, 1, 1, 1, 60]}
    training:    {epochs: 200, batch_size: 32, learning_rate: 0.001, seed: 0,
                  n_train_samples: 2000, optimizer: adam, momentum: 0.9}
    environments:
      standard:  {rot_min_deg: -20, rot_max_deg: 20, trans_min_mm: -30, trans_max_mm: 30}
      extended:  {rot_min_deg: -45, rot_max_deg: 45, trans_min_mm: -50, trans_max_mm: 50}
    phantom:     {dims: 128, spacing_mm: 2.0, kind: shell_pair, intensity_scale: 1.0,
                  train_seeds: [1, 2, 3, 4], test_seeds: [101, 102]}
    evaluation:  {n_cases: 100}

Seeds: ``derive_seed(seed, label, ...)`` hashes the root seed with a label
such as ``("dataset", "standard")``, ``("cases", "extended")`` or
``("model", "standard", "target_only")``.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from . import __version__
from .errors import InvalidArgumentError
from .geometry import EXTENDED_RANGE, STANDARD_RANGE, CameraGeometry, PoseRange, derive_seed
from .initializer.model import TrainingConfig
from .projector import ProjectionConfig
from .registration import OptimizerConfig
from .similarity import SimilarityKind
from .volume import MIN_PHANTOM_DIM, PhantomKind

CONFIG_ENV_VAR = "REGINIT_CONFIG"
_EXECUTION_ONLY = ("threads", "output_dir")


@dataclass(frozen=True)
class PhantomSettings:
    dims: int = 128
    spacing_mm: float = 2.0
    kind: PhantomKind = PhantomKind.shell_pair
    intensity_scale: float = 1.0
    train_seeds: tuple[int, ...] = (1, 2, 3, 4)
    test_seeds: tuple[int, ...] = (101, 102)

    def __post_init__(self):
        object.__setattr__(self, "kind", PhantomKind(self.kind))
        object.__setattr__(self, "train_seeds", tuple(int(s) for s in self.train_seeds))
        object.__setattr__(self, "test_seeds", tuple(int(s) for s in self.test_seeds))
        if self.dims < MIN_PHANTOM_DIM:
            raise InvalidArgumentError(f"phantom dims must be >= {MIN_PHANTOM_DIM}")
        if set(self.train_seeds) & set(self.test_seeds):
            raise InvalidArgumentError("train and test phantom seeds must be disjoint")


@dataclass(frozen=True)
class EvaluationSettings:
    n_cases: int = 100

    def __post_init__(self):
        if self.n_cases < 0:
            raise InvalidArgumentError("n_cases must be non-negative")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    threads: int = 1
    similarity: SimilarityKind = SimilarityKind.grad_ncc
    noise_sigma: float = 0.0
    naive_init: str = "identity"
    camera: CameraGeometry = field(default_factory=CameraGeometry)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    environments: dict = field(default_factory=lambda: {"standard": STANDARD_RANGE, "extended": EXTENDED_RANGE})
    phantom: PhantomSettings = field(default_factory=PhantomSettings)
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)

    def __post_init__(self):
        object.__setattr__(self, "similarity", SimilarityKind(self.similarity))
        if self.seed < 0:
            raise InvalidArgumentError("seed must be non-negative")
        if self.threads < 1:
            raise InvalidArgumentError("threads must be >= 1")
        if self.noise_sigma < 0:
            raise InvalidArgumentError("noise_sigma must be non-negative")
        if self.naive_init not in ("identity", "random"):
            raise InvalidArgumentError("naive_init must be 'identity' or 'random'")
        if not self.environments:
            raise InvalidArgumentError("at least one environment is required")

    def derive_seed(self, *labels) -> int:
        return derive_seed(self.seed, *labels)

    def to_dict(self) -> dict:
        return _plain(self)

    def hash(self) -> str:
        """Digest of every setting that can change results; worker count and output location are left out."""
        d = {k: v for k, v in self.to_dict().items() if k not in _EXECUTION_ONLY}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def provenance(self, **extra) -> dict:
        d = {"tool": "reginit", "version": __version__, "config_hash": self.hash(), "root_seed": self.seed}
        d.update(extra)
        return d


def _plain(obj):
    if is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_SECTIONS = {
    "camera": CameraGeometry,
    "projection": ProjectionConfig,
    "optimizer": OptimizerConfig,
    "training": TrainingConfig,
    "phantom": PhantomSettings,
    "evaluation": EvaluationSettings,
}


def _build_section(cls, base, values: dict):
    if not isinstance(values, dict):
        raise InvalidArgumentError(f"config section for {cls.__name__} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise InvalidArgumentError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    try:
        return replace(base, **values)
    except TypeError as exc:
        raise InvalidArgumentError(str(exc)) from exc


def config_from_dict(d: dict, base: RunConfig | None = None) -> RunConfig:
    """Overlay a (possibly partial) mapping on ``base`` (defaults if omitted) and validate."""
    base = base or RunConfig()
    d = dict(d or {})
    updates = {}
    for key, cls in _SECTIONS.items():
        if key in d:
            updates[key] = _build_section(cls, getattr(base, key), d.pop(key))
    if "environments" in d:
        envs = d.pop("environments")
        if not isinstance(envs, dict):
            raise InvalidArgumentError("environments must map names to pose ranges")
        merged = dict(base.environments)
        for name, rng in envs.items():
            merged[name] = rng if isinstance(rng, PoseRange) else PoseRange.from_dict(rng)
        updates["environments"] = merged
    scalar_keys = {"seed", "output_dir", "threads", "similarity", "noise_sigma", "naive_init"}
    unknown = set(d) - scalar_keys
    if unknown:
        raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")
    updates.update(d)
    return replace(base, **updates)


def load_config(path=None) -> RunConfig:
    """Load ``path``, else the file named by ``$REGINIT_CONFIG``, else pure defaults."""
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        exc = FileNotFoundError(f"config file not found: {path}")
        exc.filename = str(path)
        raise exc
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise InvalidArgumentError(f"{path}: top level of the config must be a mapping")
    return config_from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
