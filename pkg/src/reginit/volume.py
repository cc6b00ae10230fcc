"""Scalar volumes, trilinear sampling, synthetic phantoms and raw+JSON I/O."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgumentError
from .geometry import make_rng

MIN_PHANTOM_DIM = 16


@dataclass(frozen=True, eq=False)
class Volume:
    """Isotropic scalar grid centered on the world origin.

    ``data`` is indexed ``[i, j, k]`` along world x, y, z. Voxel ``(i, j, k)``
    has its center at ``origin_mm + spacing_mm * (i, j, k)``.
    """

    data: np.ndarray
    spacing_mm: float = 2.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 2:
            raise InvalidArgumentError(f"volume dims must all be >= 2, got {data.shape}")
        if not self.spacing_mm > 0:
            raise InvalidArgumentError("spacing_mm must be positive")
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise InvalidArgumentError("volume data must be finite and non-negative")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", float(self.spacing_mm))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def origin_mm(self) -> np.ndarray:
        return -self.spacing_mm * (np.array(self.dims, dtype=np.float64) - 1) / 2

    @property
    def bounding_radius_mm(self) -> float:
        """Radius of the sphere enclosing the zero-padded support."""
        return 0.5 * self.spacing_mm * float(np.linalg.norm(np.array(self.dims) + 1.0))

    @cached_property
    def padded(self) -> np.ndarray:
        """Copy with a one-voxel zero border, used by the samplers."""
        p = np.pad(self.data, 1)
        p.setflags(write=False)
        return p

    @cached_property
    def support_box(self) -> tuple[np.ndarray, np.ndarray] | None:
        """Bounds, in padded index coordinates, outside which the sampled field is 0.

        ``None`` for an all-zero volume.
        """
        nz = np.nonzero(self.data)
        if len(nz[0]) == 0:
            return None
        lo = np.array([a.min() for a in nz], dtype=np.float64)
        hi = np.array([a.max() for a in nz], dtype=np.float64) + 2.0
        return lo, hi

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing_mm == other.spacing_mm
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None

    def total_mass(self) -> float:
        return float(self.data.sum(dtype=np.float64))

    def centroid_voxel(self) -> np.ndarray:
        """Intensity-weighted centroid in voxel index coordinates."""
        d = self.data.astype(np.float64)
        m = d.sum()
        if m <= 0:
            raise InvalidArgumentError("centroid undefined for an empty volume")
        idx = [np.arange(n, dtype=np.float64) for n in self.dims]
        return np.array(
            [
                (d.sum(axis=(1, 2)) * idx[0]).sum() / m,
                (d.sum(axis=(0, 2)) * idx[1]).sum() / m,
                (d.sum(axis=(0, 1)) * idx[2]).sum() / m,
            ]
        )


def trilinear_sample(v: Volume, x) -> np.ndarray | float:
    """Interpolate ``v`` at world points ``x`` (shape (3,) or (..., 3)), in mm.

    Outside the grid the volume is treated as zero-padded, so the field falls
    linearly to zero over one voxel beyond the outermost centers and is exactly
    zero further out.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 3 or not np.all(np.isfinite(x)):
        raise InvalidArgumentError("query points must be finite with a trailing axis of 3")
    scalar = x.ndim == 1
    pts = x.reshape(-1, 3)
    f = (pts - v.origin_mm) / v.spacing_mm + 1.0  # index into the padded array
    pad = v.padded
    hi = np.array(pad.shape, dtype=np.float64) - 1.0
    inside = np.all((f >= 0.0) & (f < hi), axis=1)
    out = np.zeros(len(pts))
    fi = f[inside]
    i0 = np.floor(fi).astype(np.intp)
    w = fi - i0
    acc = np.zeros(len(fi))
    for dx in (0, 1):
        wx = w[:, 0] if dx else 1.0 - w[:, 0]
        for dy in (0, 1):
            wy = w[:, 1] if dy else 1.0 - w[:, 1]
            for dz in (0, 1):
                wz = w[:, 2] if dz else 1.0 - w[:, 2]
                vals = pad[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
                acc += wx * wy * wz * vals
    out[inside] = acc
    if scalar:
        return float(out[0])
    return out.reshape(x.shape[:-1])


# -- phantoms -----------------------------------------------------------------


class PhantomKind(str, enum.Enum):
    shell_pair = "shell_pair"
    wing_plate = "wing_plate"
    noise_blobs = "noise_blobs"


@dataclass(frozen=True)
class PhantomSpec:
    kind: PhantomKind = PhantomKind.shell_pair
    seed: int = 0
    intensity_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", PhantomKind(self.kind))
        if not self.intensity_scale > 0:
            raise InvalidArgumentError("intensity_scale must be positive")


def _grid(dims):
    # normalized coordinates in [-1, 1] along each axis
    axes = [np.linspace(-1.0, 1.0, n) for n in dims]
    return np.meshgrid(*axes, indexing="ij")


def _rot(ax, ay, az):
    from .geometry import euler_to_rotation

    return euler_to_rotation(ax, ay, az)


def _ellipsoid_radius(X, Y, Z, center, radii, R):
    # normalized ellipsoidal radius, 1 on the surface
    px, py, pz = X - center[0], Y - center[1], Z - center[2]
    q = [R[0, i] * px + R[1, i] * py + R[2, i] * pz for i in range(3)]
    return np.sqrt((q[0] / radii[0]) ** 2 + (q[1] / radii[1]) ** 2 + (q[2] / radii[2]) ** 2)


def _shell(X, Y, Z, center, radii, R, width):
    r = _ellipsoid_radius(X, Y, Z, center, radii, R)
    return np.exp(-(((r - 1.0) / width) ** 2))


def _solid(X, Y, Z, center, radii, R, softness=0.15):
    r = _ellipsoid_radius(X, Y, Z, center, radii, R)
    return 1.0 / (1.0 + np.exp((r - 1.0) / softness))


def _plate(X, Y, Z, center, half_extent, R, thickness):
    # soft-edged slab: thin along local z, bounded softly in local x, y
    px, py, pz = X - center[0], Y - center[1], Z - center[2]
    q = [R[0, i] * px + R[1, i] * py + R[2, i] * pz for i in range(3)]
    inplane = ((q[0] / half_extent[0]) ** 2 + (q[1] / half_extent[1]) ** 2) ** 2
    return np.exp(-((q[2] / thickness) ** 2)) * np.exp(-inplane)


def _shell_pair(dims, rng):
    X, Y, Z = _grid(dims)
    j = lambda s: rng.uniform(-s, s)  # noqa: E731  small seeded jitter
    vol = np.zeros(dims)
    # two hip-like shells of unequal size, offset in x, y and z
    vol += 1.0 * _shell(
        X, Y, Z, (-0.32 + j(0.02), -0.08 + j(0.02), 0.06), (0.22, 0.27, 0.19), _rot(15, -10, 20 + j(5)), 0.4
    )
    vol += 0.8 * _shell(
        X, Y, Z, (0.35 + j(0.02), -0.03 + j(0.02), -0.08), (0.17, 0.21, 0.24), _rot(-20, 5, -35 + j(5)), 0.45
    )
    # iliac-wing-like plates, tilted differently on each side
    vol += 0.7 * _plate(X, Y, Z, (-0.37, 0.33, 0.03), (0.26, 0.18), _rot(70, 25 + j(5), 10), 0.09)
    vol += 0.6 * _plate(X, Y, Z, (0.34, 0.38, -0.05), (0.2, 0.23), _rot(60, -40 + j(5), -15), 0.09)
    # sacrum-like solid, posterior and off-axis
    vol += 0.9 * _solid(X, Y, Z, (0.04, 0.15, 0.35), (0.1, 0.22, 0.09), _rot(20, 0, 10 + j(5)), 0.3)
    # pubic bar, anterior and low
    vol += 0.5 * _solid(X, Y, Z, (-0.03, -0.4, -0.28), (0.28, 0.07, 0.07), _rot(0, 0, 8 + j(4)), 0.3)
    return vol


def _wing_plate(dims, rng):
    X, Y, Z = _grid(dims)
    vol = np.zeros(dims)
    for k in range(4):
        c = (rng.uniform(-0.35, 0.35), rng.uniform(-0.35, 0.35), rng.uniform(-0.3, 0.3))
        ext = (rng.uniform(0.12, 0.25), rng.uniform(0.08, 0.2))
        R = _rot(*rng.uniform(-80, 80, size=3))
        vol += rng.uniform(0.5, 1.0) * _plate(X, Y, Z, c, ext, R, 0.05)
    vol += 0.8 * _solid(X, Y, Z, (0.1, -0.15, 0.05), (0.12, 0.06, 0.09), _rot(10, 30, 0))
    return vol


def _noise_blobs(dims, rng):
    X, Y, Z = _grid(dims)
    vol = np.zeros(dims)
    for _ in range(12):
        c = rng.uniform(-0.45, 0.45, size=3)
        s = rng.uniform(0.05, 0.14, size=3)
        R = _rot(*rng.uniform(-90, 90, size=3))
        vol += rng.uniform(0.3, 1.0) * _solid(X, Y, Z, c, s, R, softness=0.2)
    return vol


_BUILDERS = {
    PhantomKind.shell_pair: _shell_pair,
    PhantomKind.wing_plate: _wing_plate,
    PhantomKind.noise_blobs: _noise_blobs,
}


def make_phantom(dims=128, spacing_mm: float = 2.0, spec: PhantomSpec | None = None) -> Volume:
    """Deterministic, asymmetric, pelvis-like synthetic volume."""
    spec = spec or PhantomSpec()
    if np.isscalar(dims):
        dims = (int(dims),) * 3
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < MIN_PHANTOM_DIM:
        raise InvalidArgumentError(f"phantom dims must be 3 values >= {MIN_PHANTOM_DIM}, got {dims}")
    rng = make_rng(spec.seed)
    vol = _BUILDERS[spec.kind](dims, rng)
    vol = np.clip(vol, 0.0, None) * spec.intensity_scale
    # drop numerically negligible tails so that empty space is exactly empty
    vol[vol < 1e-4 * spec.intensity_scale] = 0.0
    return Volume(
        vol.astype(np.float32),
        spacing_mm,
        meta={"kind": spec.kind.value, "seed": spec.seed, "intensity_scale": spec.intensity_scale},
    )


# -- raw + JSON I/O -----------------------------------------------------------


def _stem(path) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p


def write_raw(path, array3d: np.ndarray, spacing_mm: float, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``<stem>.json`` + ``<stem>.raw`` (little-endian float32, x fastest)."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    header = {"dims": [int(n) for n in array3d.shape], "spacing_mm": float(spacing_mm)}
    if extra:
        header.update(extra)
    json_path, raw_path = stem.with_suffix(".json"), stem.with_suffix(".raw")
    raw_path.write_bytes(np.asarray(array3d, dtype="<f4").tobytes(order="F"))
    json_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return json_path, raw_path


def read_raw(path) -> tuple[np.ndarray, dict]:
    stem = _stem(path)
    json_path, raw_path = stem.with_suffix(".json"), stem.with_suffix(".raw")
    try:
        header = json.loads(json_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{json_path}: malformed header ({exc})") from exc
    dims = header.get("dims")
    spacing = header.get("spacing_mm")
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or not all(isinstance(n, int) and n >= 1 for n in dims)
        or not isinstance(spacing, (int, float))
    ):
        raise FormatError(f"{json_path}: header needs integer 'dims'[3] and numeric 'spacing_mm'")
    payload = raw_path.read_bytes()
    expected = dims[0] * dims[1] * dims[2] * 4
    if len(payload) != expected:
        raise FormatError(
            f"{raw_path}: size mismatch, header dims {dims} need {expected} bytes, found {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F")
    return arr.astype(np.float32), header


def save_volume(v: Volume, path) -> tuple[Path, Path]:
    return write_raw(path, v.data, v.spacing_mm)


def load_volume(path) -> Volume:
    arr, header = read_raw(path)
    return Volume(arr, float(header["spacing_mm"]))
