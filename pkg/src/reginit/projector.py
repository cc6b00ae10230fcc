"""Cone-beam DRR rendering of a posed volume under the C-arm geometry."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .errors import FormatError, InvalidArgumentError
from .geometry import CameraGeometry, PoseParams, pose_to_transform
from .volume import read_raw, write_raw


@dataclass(frozen=True, eq=False)
class DetectorImage:
    """2D image on the detector grid; ``data[row, col]`` with row 0 at the top."""

    data: np.ndarray
    pixel_spacing_mm: float = 2.176

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise InvalidArgumentError(f"detector image must be 2D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("detector image contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "pixel_spacing_mm", float(self.pixel_spacing_mm))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, DetectorImage):
            return NotImplemented
        return self.pixel_spacing_mm == other.pixel_spacing_mm and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class ProjectionConfig:
    n_samples_per_ray: int = 256
    normalize_output: bool = True

    def __post_init__(self):
        if int(self.n_samples_per_ray) < 32:
            raise InvalidArgumentError("n_samples_per_ray must be >= 32")


def pixel_centers(cam: CameraGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Detector-plane x (per column) and y (per row) coordinates of pixel centers, mm."""
    x = (np.arange(cam.detector_cols) - (cam.detector_cols - 1) / 2.0) * cam.pixel_spacing_mm
    y = ((cam.detector_rows - 1) / 2.0 - np.arange(cam.detector_rows)) * cam.pixel_spacing_mm
    return x, y


def ray_for_pixel(cam: CameraGeometry, row: int, col: int) -> tuple[np.ndarray, np.ndarray]:
    """Source point and unit direction of the ray through a pixel center."""
    if not (0 <= row < cam.detector_rows and 0 <= col < cam.detector_cols):
        raise InvalidArgumentError(
            f"pixel ({row}, {col}) outside {cam.detector_rows}x{cam.detector_cols} detector"
        )
    x = (col - (cam.detector_cols - 1) / 2.0) * cam.pixel_spacing_mm
    y = ((cam.detector_rows - 1) / 2.0 - row) * cam.pixel_spacing_mm
    source = np.array([0.0, 0.0, cam.source_z])
    d = np.array([x, y, cam.detector_z]) - source
    return source, d / np.linalg.norm(d)


@numba.njit(cache=True, fastmath=True, boundscheck=False)
def _render_kernel(pad, box_lo, box_hi, spacing, origin, Rs, ts, src_z, det_z, pix, nsamp, radius, out):
    n_pose, rows, cols = out.shape
    nx, ny, nz = pad.shape[0] - 2, pad.shape[1] - 2, pad.shape[2] - 2
    inv = 1.0 / spacing
    hx, hy, hz = nx + 1.0, ny + 1.0, nz + 1.0
    bx0, by0, bz0 = box_lo[0], box_lo[1], box_lo[2]
    bx1, by1, bz1 = box_hi[0], box_hi[1], box_hi[2]
    for q in range(n_pose):
        R = Rs[q]
        tx, ty, tz = ts[q, 0], ts[q, 1], ts[q, 2]
        # source in the volume frame: R^T (s - t)
        ox, oy, oz = -tx, -ty, src_z - tz
        vox = R[0, 0] * ox + R[1, 0] * oy + R[2, 0] * oz
        voy = R[0, 1] * ox + R[1, 1] * oy + R[2, 1] * oz
        voz = R[0, 2] * ox + R[1, 2] * oy + R[2, 2] * oz
        fx0 = (vox - origin[0]) * inv + 1.0
        fy0 = (voy - origin[1]) * inv + 1.0
        fz0 = (voz - origin[2]) * inv + 1.0
        for r in range(rows):
            y = ((rows - 1) * 0.5 - r) * pix
            for c in range(cols):
                x = (c - (cols - 1) * 0.5) * pix
                dz = det_z - src_z
                nrm = math.sqrt(x * x + y * y + dz * dz)
                dx = x / nrm
                dy = y / nrm
                dz = dz / nrm
                vdx = R[0, 0] * dx + R[1, 0] * dy + R[2, 0] * dz
                vdy = R[0, 1] * dx + R[1, 1] * dy + R[2, 1] * dz
                vdz = R[0, 2] * dx + R[1, 2] * dy + R[2, 2] * dz
                # chord through the bounding sphere centered on the volume center
                b = vox * vdx + voy * vdy + voz * vdz
                disc = b * b - (vox * vox + voy * voy + voz * voz - radius * radius)
                out[q, r, c] = 0.0
                if disc <= 0.0:
                    continue
                sq = math.sqrt(disc)
                t0 = -b - sq
                step = 2.0 * sq / nsamp
                gx, gy, gz = vdx * inv, vdy * inv, vdz * inv
                # clip the sample index range to the non-zero support; samples outside contribute 0
                lo = t0
                hi = t0 + 2.0 * sq
                if gx != 0.0:
                    a0 = (bx0 - fx0) / gx
                    a1 = (bx1 - fx0) / gx
                    lo = max(lo, min(a0, a1))
                    hi = min(hi, max(a0, a1))
                elif fx0 < bx0 or fx0 >= bx1:
                    continue
                if gy != 0.0:
                    a0 = (by0 - fy0) / gy
                    a1 = (by1 - fy0) / gy
                    lo = max(lo, min(a0, a1))
                    hi = min(hi, max(a0, a1))
                elif fy0 < by0 or fy0 >= by1:
                    continue
                if gz != 0.0:
                    a0 = (bz0 - fz0) / gz
                    a1 = (bz1 - fz0) / gz
                    lo = max(lo, min(a0, a1))
                    hi = min(hi, max(a0, a1))
                elif fz0 < bz0 or fz0 >= bz1:
                    continue
                if hi <= lo:
                    continue
                k0 = max(0, int(math.floor((lo - t0) / step - 0.5)))
                k1 = min(nsamp, int(math.ceil((hi - t0) / step - 0.5)) + 1)
                acc = 0.0
                for k in range(k0, k1):
                    tt = t0 + (k + 0.5) * step
                    fx = fx0 + tt * gx
                    fy = fy0 + tt * gy
                    fz = fz0 + tt * gz
                    if fx < 0.0 or fy < 0.0 or fz < 0.0 or fx >= hx or fy >= hy or fz >= hz:
                        continue
                    i = int(fx)
                    j = int(fy)
                    l = int(fz)  # noqa: E741
                    wx = fx - i
                    wy = fy - j
                    wz = fz - l
                    c00 = pad[i, j, l] * (1.0 - wx) + pad[i + 1, j, l] * wx
                    c01 = pad[i, j + 1, l] * (1.0 - wx) + pad[i + 1, j + 1, l] * wx
                    c10 = pad[i, j, l + 1] * (1.0 - wx) + pad[i + 1, j, l + 1] * wx
                    c11 = pad[i, j + 1, l + 1] * (1.0 - wx) + pad[i + 1, j + 1, l + 1] * wx
                    acc += (c00 * (1.0 - wy) + c01 * wy) * (1.0 - wz) + (c10 * (1.0 - wy) + c11 * wy) * wz
                out[q, r, c] = acc * step
    return out


def normalize_minmax(a: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; constant input maps to all zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def render_stack(volume, poses, cam: CameraGeometry, cfg: ProjectionConfig | None = None) -> np.ndarray:
    """Render several poses of one volume; returns an array (n_poses, rows, cols)."""
    cfg = cfg or ProjectionConfig()
    poses = list(poses)
    Rs = np.empty((len(poses), 3, 3))
    ts = np.empty((len(poses), 3))
    for q, p in enumerate(poses):
        T = pose_to_transform(p)
        Rs[q], ts[q] = T.R, T.t
    out = np.zeros((len(poses), cam.detector_rows, cam.detector_cols))
    box = volume.support_box
    if box is None:
        return out
    _render_kernel(
        volume.padded,
        box[0],
        box[1],
        volume.spacing_mm,
        volume.origin_mm,
        Rs,
        ts,
        cam.source_z,
        cam.detector_z,
        cam.pixel_spacing_mm,
        int(cfg.n_samples_per_ray),
        volume.bounding_radius_mm,
        out,
    )
    if cfg.normalize_output:
        for q in range(len(poses)):
            out[q] = normalize_minmax(out[q])
    return out


def render_drr(volume, theta: PoseParams, cam: CameraGeometry, cfg: ProjectionConfig | None = None) -> DetectorImage:
    """DRR of ``volume`` transformed by ``theta``.

    Each pixel integrates trilinear samples taken at equispaced midpoints of
    the ray's chord through the volume's bounding sphere (sum times step, mm).
    """
    img = render_stack(volume, [theta], cam, cfg)[0]
    return DetectorImage(img, cam.pixel_spacing_mm)


def add_noise(image: DetectorImage, sigma: float, rng) -> DetectorImage:
    """Additive i.i.d. Gaussian pixel noise; ``sigma == 0`` returns the input."""
    if sigma <= 0:
        return image
    return DetectorImage(image.data + rng.normal(0.0, sigma, size=image.shape), image.pixel_spacing_mm)


# -- persistence --------------------------------------------------------------


def save_image(img: DetectorImage, path, extra: dict | None = None):
    meta = {"kind": "detector_image"}
    if extra:
        meta.update(extra)
    return write_raw(path, img.data.T[:, :, None], img.pixel_spacing_mm, meta)


def load_image(path) -> DetectorImage:
    arr, header = read_raw(path)
    if arr.shape[2] != 1:
        raise FormatError(f"{path}: detector images need nz = 1, got dims {list(arr.shape)}")
    return DetectorImage(arr[:, :, 0].T.astype(np.float64), float(header["spacing_mm"]))


def export_png16(img: DetectorImage | np.ndarray, path) -> Path:
    """Min-max scaled 16-bit grayscale PNG for inspection."""
    from PIL import Image

    data = img.data if isinstance(img, DetectorImage) else np.asarray(img)
    u16 = np.round(normalize_minmax(data) * 65535.0).astype(np.uint16)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u16).save(path)
    return path
