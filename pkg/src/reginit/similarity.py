"""Image similarity metrics, the registration loss, and difference maps."""

from __future__ import annotations

import enum
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError
from .projector import DetectorImage, normalize_minmax


class SimilarityKind(str, enum.Enum):
    ncc = "ncc"
    grad_ncc = "grad_ncc"


def _pixels(img) -> np.ndarray:
    if isinstance(img, DetectorImage):
        return img.data
    return np.asarray(img, dtype=np.float64)


def _check_pair(a, b):
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    saa = np.dot(a, a)
    sbb = np.dot(b, b)
    if saa == 0.0 and sbb == 0.0:
        raise DegenerateInputError("both images are constant; correlation is undefined")
    if saa == 0.0 or sbb == 0.0:
        return 0.0
    # sqrt(saa * sbb) keeps ncc(x, x) exactly 1 and the result exactly symmetric
    r = np.dot(a, b) / np.sqrt(saa * sbb)
    return float(min(1.0, max(-1.0, r)))


def ncc(a, b) -> float:
    """Pearson correlation of all pixels, in [-1, 1].

    If exactly one image is constant the correlation is taken as 0; if both
    are, :class:`DegenerateInputError` is raised.
    """
    a, b = _check_pair(a, b)
    return _pearson(a, b)


def image_gradients(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences with replicated borders: (d/dcol, d/drow)."""
    p = np.pad(a, 1, mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    return gx, gy


def grad_ncc(a, b) -> float:
    """Gradient correlation: mean of the NCCs of horizontal and vertical derivatives.

    A constant input has zero gradients everywhere and raises
    :class:`DegenerateInputError`.
    """
    a, b = _check_pair(a, b)
    if min(a.shape) < 3:
        raise InvalidArgumentError("gradient NCC needs images of at least 3x3 pixels")
    if np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        raise DegenerateInputError("constant image has no gradients")
    ax, ay = image_gradients(a)
    bx, by = image_gradients(b)
    return 0.5 * (_pearson(ax, bx) + _pearson(ay, by))


_METRICS = {SimilarityKind.ncc: ncc, SimilarityKind.grad_ncc: grad_ncc}


def similarity(kind, a, b) -> float:
    return _METRICS[SimilarityKind(kind)](a, b)


def similarity_loss(kind, target, moving) -> float:
    """``1 - similarity``; 0 for perfect alignment, at most 2."""
    return 1.0 - similarity(kind, target, moving)


def difference_map(moving, target) -> np.ndarray:
    """Signed ``moving - target`` after min-max normalizing each input."""
    m, t = _check_pair(moving, target)
    return normalize_minmax(m) - normalize_minmax(t)


def diverging_rgb(diff: np.ndarray, limit: float = 1.0) -> np.ndarray:
    """Blue (-limit) -> white (0) -> red (+limit) colors as uint8 RGB."""
    x = np.clip(np.asarray(diff, dtype=np.float64) / limit, -1.0, 1.0)
    pos = np.clip(x, 0.0, 1.0)
    neg = np.clip(-x, 0.0, 1.0)
    r = 1.0 - neg
    g = 1.0 - pos - neg
    b = 1.0 - pos
    rgb = np.stack([r, g, b], axis=-1)
    return np.round(rgb * 255.0).astype(np.uint8)


def export_difference_png(diff: np.ndarray, path, limit: float = 1.0) -> Path:
    """Write a difference map as RGB PNG; red is positive, blue negative, white 0."""
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(diverging_rgb(diff, limit)).save(path)
    return path
