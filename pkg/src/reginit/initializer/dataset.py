"""Simulated training data: random poses of training volumes and their DRRs."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path


from ..errors import FormatError, InvalidArgumentError
from ..geometry import IDENTITY_POSE, CameraGeometry, PoseParams, PoseRange, make_rng, sample_pose
from ..projector import DetectorImage, ProjectionConfig, add_noise, load_image, render_drr, save_image


@dataclass(frozen=True)
class TrainingSample:
    target_image: DetectorImage
    theta_true: PoseParams
    volume_id: str


def _named(volumes) -> list[tuple[str, object]]:
    if isinstance(volumes, dict):
        return list(volumes.items())
    return [(f"vol{i}", v) for i, v in enumerate(volumes)]


def generate_dataset(
    volumes,
    pose_range: PoseRange,
    n: int,
    seed: int,
    cam: CameraGeometry | None = None,
    projection: ProjectionConfig | None = None,
    noise_sigma: float = 0.0,
) -> list[TrainingSample]:
    """``n`` samples, volumes used round-robin, poses uniform in ``pose_range``.

    ``volumes`` is a list (ids ``vol0``, ``vol1``, ...) or a dict id -> Volume.
    """
    named = _named(volumes)
    if not named:
        raise InvalidArgumentError("need at least one volume")
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    cam = cam or CameraGeometry()
    projection = projection or ProjectionConfig()
    rng = make_rng(seed)
    samples = []
    for k in range(n):
        vid, vol = named[k % len(named)]
        theta = sample_pose(pose_range, rng)
        img = render_drr(vol, theta, cam, projection)
        if noise_sigma > 0:
            img = add_noise(img, noise_sigma, rng)
        samples.append(TrainingSample(img, theta, vid))
    return samples


def reference_images(volumes, cam=None, projection=None) -> dict[str, DetectorImage]:
    """Neutral-pose DRR of each volume, the fixed moving image of the two-image variants."""
    cam = cam or CameraGeometry()
    return {vid: render_drr(v, IDENTITY_POSE, cam, projection) for vid, v in _named(volumes)}


# -- on-disk layout -----------------------------------------------------------
#   <dir>/manifest.json           poses, volume ids, generation settings
#   <dir>/images/NNNNNN.{json,raw}
#   <dir>/refs/<volume_id>.{json,raw}


def save_dataset(directory, samples, references=None, meta=None) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for k, s in enumerate(samples):
        rel = f"images/{k:06d}"
        save_image(s.target_image, directory / rel)
        entries.append({"index": k, "volume_id": s.volume_id, "pose": s.theta_true.to_dict(), "image": rel})
    refs = {}
    for vid, img in (references or {}).items():
        rel = f"refs/{vid}"
        save_image(img, directory / rel)
        refs[vid] = rel
    manifest = {"samples": entries, "references": refs, "meta": meta or {}}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_dataset(directory) -> tuple[list[TrainingSample], dict[str, DetectorImage], dict]:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
        entries = manifest["samples"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"{path}: malformed dataset manifest ({exc})") from exc
    samples = [
        TrainingSample(load_image(directory / e["image"]), PoseParams.from_dict(e["pose"]), e["volume_id"])
        for e in entries
    ]
    refs = {vid: load_image(directory / rel) for vid, rel in manifest.get("references", {}).items()}
    return samples, refs, manifest.get("meta", {})
