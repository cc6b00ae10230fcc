"""Network input stacks for the three initializer variants."""

from __future__ import annotations

import enum

import numpy as np

from ..errors import InvalidArgumentError
from ..projector import DetectorImage, normalize_minmax


class InitializerVariant(str, enum.Enum):
    target_only = "target_only"
    two_image_pe = "two_image_pe"
    two_image_pe_ac = "two_image_pe_ac"

    @property
    def needs_reference(self) -> bool:
        return self is not InitializerVariant.target_only


def channel_count(variant, pe_frequencies: int = 1) -> int:
    variant = InitializerVariant(variant)
    if variant is InitializerVariant.target_only:
        return 1
    n = 2 + 4 * pe_frequencies
    if variant is InitializerVariant.two_image_pe_ac:
        n += 2
    return n


def pixel_coordinates(rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
    """(u, v) in [-1, 1]: u varies down the rows, v across the columns."""
    u = np.broadcast_to(np.linspace(-1.0, 1.0, rows)[:, None], (rows, cols))
    v = np.broadcast_to(np.linspace(-1.0, 1.0, cols)[None, :], (rows, cols))
    return u, v


def static_channels(variant, rows: int, cols: int, pe_frequencies: int = 1) -> np.ndarray:
    """Pose-independent channels: positional encoding, then absolute coordinates if requested."""
    variant = InitializerVariant(variant)
    if variant is InitializerVariant.target_only:
        return np.zeros((0, rows, cols))
    u, v = pixel_coordinates(rows, cols)
    chans = []
    for f in range(pe_frequencies):
        w = np.pi * 2.0**f
        chans += [np.sin(w * u), np.cos(w * u), np.sin(w * v), np.cos(w * v)]
    if variant is InitializerVariant.two_image_pe_ac:
        chans += [u, v]
    return np.stack(chans)


def _as_array(img):
    return img.data if isinstance(img, DetectorImage) else np.asarray(img, dtype=np.float64)


def build_input(variant, target, moving_ref=None, pe_frequencies: int = 1) -> np.ndarray:
    """Channel stack (C, rows, cols).

    target_only: [target]; two_image_pe: [target, moving_ref, sin/cos PE];
    two_image_pe_ac: the same plus the (u, v) pixel coordinates.
    """
    variant = InitializerVariant(variant)
    t = normalize_minmax(_as_array(target))
    if not variant.needs_reference:
        if moving_ref is not None:
            raise InvalidArgumentError("target_only variant takes no reference image")
        return t[None]
    if moving_ref is None:
        raise InvalidArgumentError(f"variant {variant.value} needs a reference moving image")
    m = normalize_minmax(_as_array(moving_ref))
    if m.shape != t.shape:
        raise InvalidArgumentError(f"reference shape {m.shape} differs from target {t.shape}")
    return np.concatenate([t[None], m[None], static_channels(variant, *t.shape, pe_frequencies)])
