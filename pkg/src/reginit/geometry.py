"""Rigid transforms, 6-DoF pose parameters and the C-arm camera model.

Conventions used everywhere in the package:

* world origin at the C-arm iso-center, z along the source -> detector axis,
  x to the right and y up on the detector;
* Euler angles are extrinsic x, then y, then z: ``R = Rz @ Ry @ Rx``;
* a pose maps volume coordinates to world coordinates as ``x -> R x + t``,
  rotating about the volume center (which sits at the iso-center);
* angles in degrees and lengths in millimeters at every interface.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import InvalidArgumentError

POSE_KEYS = ("rx_deg", "ry_deg", "rz_deg", "tx_mm", "ty_mm", "tz_mm")


def wrap_angle(deg: float) -> float:
    """Map an angle in degrees onto [-180, 180); in-range values pass through untouched."""
    if -180.0 <= deg < 180.0:
        return float(deg)
    return float((deg + 180.0) % 360.0 - 180.0)


@dataclass(frozen=True)
class PoseParams:
    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0

    def __post_init__(self):
        vals = [getattr(self, f.name) for f in fields(self)]
        if not all(math.isfinite(v) for v in vals):
            raise InvalidArgumentError(f"pose components must be finite, got {vals}")
        for name in ("rx", "ry", "rz"):
            object.__setattr__(self, name, wrap_angle(getattr(self, name)))
        for name in ("tx", "ty", "tz"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @classmethod
    def from_array(cls, a) -> "PoseParams":
        a = np.asarray(a, dtype=np.float64).reshape(6)
        return cls(*(float(v) for v in a))

    def as_array(self) -> np.ndarray:
        return np.array([self.rx, self.ry, self.rz, self.tx, self.ty, self.tz])

    @property
    def rotation_deg(self) -> np.ndarray:
        return np.array([self.rx, self.ry, self.rz])

    @property
    def translation_mm(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz])

    def to_dict(self) -> dict:
        return dict(zip(POSE_KEYS, self.as_array().tolist()))

    @classmethod
    def from_dict(cls, d: dict) -> "PoseParams":
        missing = [k for k in POSE_KEYS if k not in d]
        if missing:
            raise InvalidArgumentError(f"pose dict missing keys {missing}")
        return cls(*(float(d[k]) for k in POSE_KEYS))


IDENTITY_POSE = PoseParams()


@dataclass(frozen=True)
class RigidTransform:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidArgumentError("transform entries must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) >= 1e-9 or abs(np.linalg.det(R) - 1.0) >= 1e-9:
            raise InvalidArgumentError("R must be a proper rotation (orthonormal, det 1)")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous form ``[[R, t], [0, 1]]``."""
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T


@dataclass(frozen=True)
class CameraGeometry:
    source_to_detector_mm: float = 1020.0
    source_to_iso_mm: float = 800.0
    detector_rows: int = 128
    detector_cols: int = 128
    pixel_spacing_mm: float = 2.176

    def __post_init__(self):
        if not 0 < self.source_to_iso_mm < self.source_to_detector_mm:
            raise InvalidArgumentError(
                "need 0 < source_to_iso_mm < source_to_detector_mm, got "
                f"{self.source_to_iso_mm}, {self.source_to_detector_mm}"
            )
        if self.detector_rows < 2 or self.detector_cols < 2:
            raise InvalidArgumentError("detector must be at least 2x2 pixels")
        if not self.pixel_spacing_mm > 0:
            raise InvalidArgumentError("pixel_spacing_mm must be positive")

    @property
    def magnification(self) -> float:
        return self.source_to_detector_mm / self.source_to_iso_mm

    @property
    def source_z(self) -> float:
        return -self.source_to_iso_mm

    @property
    def detector_z(self) -> float:
        return self.source_to_detector_mm - self.source_to_iso_mm

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraGeometry":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


@dataclass(frozen=True)
class PoseRange:
    rot_min_deg: float
    rot_max_deg: float
    trans_min_mm: float
    trans_max_mm: float

    def __post_init__(self):
        if not self.rot_min_deg < self.rot_max_deg:
            raise InvalidArgumentError("rot_min_deg must be < rot_max_deg")
        if not self.trans_min_mm < self.trans_max_mm:
            raise InvalidArgumentError("trans_min_mm must be < trans_max_mm")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.rot_min_deg] * 3 + [self.trans_min_mm] * 3)

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.rot_max_deg] * 3 + [self.trans_max_mm] * 3)

    @property
    def midpoint(self) -> PoseParams:
        return PoseParams.from_array(0.5 * (self.lower + self.upper))

    def contains(self, p: PoseParams) -> bool:
        a = p.as_array()
        return bool(np.all(a >= self.lower) and np.all(a <= self.upper))

    def normalize(self, a) -> np.ndarray:
        """Affinely map pose vectors onto [-1, 1]^6 (last axis of length 6)."""
        lo, hi = self.lower, self.upper
        return (np.asarray(a, dtype=np.float64) - 0.5 * (lo + hi)) / (0.5 * (hi - lo))

    def denormalize(self, z) -> np.ndarray:
        lo, hi = self.lower, self.upper
        return np.asarray(z, dtype=np.float64) * (0.5 * (hi - lo)) + 0.5 * (lo + hi)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "PoseRange":
        return cls(**{f.name: float(d[f.name]) for f in fields(cls)})


STANDARD_RANGE = PoseRange(-20.0, 20.0, -30.0, 30.0)
EXTENDED_RANGE = PoseRange(-45.0, 45.0, -50.0, 50.0)
ENVIRONMENTS = {"standard": STANDARD_RANGE, "extended": EXTENDED_RANGE}


def _check_finite(*vals):
    if not all(math.isfinite(v) for v in vals):
        raise InvalidArgumentError(f"expected finite values, got {vals}")


def euler_to_rotation(rx_deg: float, ry_deg: float, rz_deg: float) -> np.ndarray:
    """Rotation matrix ``Rz(rz) @ Ry(ry) @ Rx(rx)`` for angles in degrees."""
    rx_deg, ry_deg, rz_deg = float(rx_deg), float(ry_deg), float(rz_deg)
    _check_finite(rx_deg, ry_deg, rz_deg)
    a, b, c = math.radians(rx_deg), math.radians(ry_deg), math.radians(rz_deg)
    ca, sa = math.cos(a), math.sin(a)
    cb, sb = math.cos(b), math.sin(b)
    cc, sc = math.cos(c), math.sin(c)
    # closed form of Rz @ Ry @ Rx
    return np.array(
        [
            [cc * cb, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa],
            [sc * cb, sc * sb * sa + cc * ca, sc * sb * ca - cc * sa],
            [-sb, cb * sa, cb * ca],
        ]
    )


def pose_to_transform(p: PoseParams) -> RigidTransform:
    return RigidTransform(euler_to_rotation(p.rx, p.ry, p.rz), p.translation_mm)


def transform_inverse(T: RigidTransform) -> RigidTransform:
    Rt = T.R.T
    return RigidTransform(Rt, -Rt @ T.t)


def compose(A: RigidTransform, B: RigidTransform) -> RigidTransform:
    """``A o B``: apply B first, then A."""
    return RigidTransform(A.R @ B.R, A.R @ B.t + A.t)


def apply_transform(T: RigidTransform, x) -> np.ndarray:
    """Apply to a point (3,) or a stack of points (..., 3)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 3:
        raise InvalidArgumentError(f"points must have a trailing axis of 3, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("points must be finite")
    return x @ T.R.T + T.t


# -- randomness ---------------------------------------------------------------


def make_rng(seed: int) -> np.random.Generator:
    """Portable counter-based generator (Philox) for a non-negative integer seed."""
    return np.random.Generator(np.random.Philox(int(seed)))


def derive_seed(root_seed: int, *labels) -> int:
    """Stable per-subsystem seed: sha256 of the root seed and labels, truncated to 63 bits."""
    text = "/".join([str(int(root_seed))] + [str(lbl) for lbl in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def _as_rng(rng_or_seed) -> np.random.Generator:
    if isinstance(rng_or_seed, np.random.Generator):
        return rng_or_seed
    return make_rng(rng_or_seed)


def sample_pose(pose_range: PoseRange, rng) -> PoseParams:
    """Draw a pose with i.i.d. uniform rotations and translations from ``pose_range``.

    ``rng`` is either a seed or a ``numpy.random.Generator`` owned by the caller.
    """
    g = _as_rng(rng)
    rot = g.uniform(pose_range.rot_min_deg, pose_range.rot_max_deg, size=3)
    trans = g.uniform(pose_range.trans_min_mm, pose_range.trans_max_mm, size=3)
    return PoseParams.from_array(np.concatenate([rot, trans]))


def sample_poses(pose_range: PoseRange, n: int, rng) -> list[PoseParams]:
    g = _as_rng(rng)
    return [sample_pose(pose_range, g) for _ in range(n)]
