"""Annotation noise: eta-scaled normal perturbations of ground-truth poses.

Noise is applied to the image-space pose parameters (pixels / degrees /
mm), where the standard deviations are specified, and the result is mapped
back to a world pose so the rest of the pipeline consumes one annotation
type. Normal draws go through the inverse CDF of seeded uniforms, which
keeps sequences reproducible across platforms.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import (
    ImagePose,
    ProjectionGeometry,
    WorldPose,
    image_to_world_pose,
    world_to_image_pose,
)
from .stats import norm_ppf

_TILT_CLAMP_DEG = 89.0


@dataclass(frozen=True)
class NoiseLevel:
    """Dimensionless noise scale; all component sigmas are linear in eta."""

    eta: float

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be non-negative")

    @property
    def sigma_position_px(self) -> float:
        return self.eta

    @property
    def sigma_alpha_deg(self) -> float:
        return 10.0 * self.eta

    @property
    def sigma_depth_mm(self) -> float:
        return 17.5 * self.eta

    @property
    def sigma_tilt_deg(self) -> float:
        return 5.0 * self.eta


def normal_draws(rng: np.random.Generator, n: int) -> np.ndarray:
    """Standard normal samples via inverse-CDF of uniform draws."""
    return norm_ppf(rng.random(n))


def perturb_image_pose(ip: ImagePose, nl: NoiseLevel,
                       rng: np.random.Generator) -> ImagePose:
    """Apply one independent normal perturbation to each pose parameter.

    Draw order is fixed (u, v, alpha, depth, tilt); tilt is clamped to
    [-89, 89] degrees so the inverse projection stays defined.
    """
    z = normal_draws(rng, 5)
    tilt = ip.tilt_deg + nl.sigma_tilt_deg * z[4]
    tilt = min(max(tilt, -_TILT_CLAMP_DEG), _TILT_CLAMP_DEG)
    depth = max(ip.depth_mm + nl.sigma_depth_mm * z[3], 1.0)
    return ImagePose(
        u=ip.u + nl.sigma_position_px * z[0],
        v=ip.v + nl.sigma_position_px * z[1],
        alpha_deg=ip.alpha_deg + nl.sigma_alpha_deg * z[2],
        depth_mm=depth,
        tilt_deg=tilt,
    )


def perturb_image_components(ip: ImagePose, nl: NoiseLevel,
                             rng: np.random.Generator, n: int) -> np.ndarray:
    """Vectorized perturbations: (n, 5) rows of (u, v, alpha, depth, tilt).

    Consumes the rng stream exactly like n sequential perturb_image_pose
    calls (uniform draws are stream-order stable under chunking), with the
    same tilt clamp and alpha wrap.
    """
    z = normal_draws(rng, 5 * n).reshape(n, 5)
    u = ip.u + nl.sigma_position_px * z[:, 0]
    v = ip.v + nl.sigma_position_px * z[:, 1]
    alpha = ip.alpha_deg + nl.sigma_alpha_deg * z[:, 2]
    alpha = alpha - 360.0 * np.floor((alpha + 180.0) / 360.0)
    alpha = np.where(alpha <= -180.0, alpha + 360.0, alpha)
    depth = np.maximum(ip.depth_mm + nl.sigma_depth_mm * z[:, 3], 1.0)
    tilt = np.clip(ip.tilt_deg + nl.sigma_tilt_deg * z[:, 4],
                   -_TILT_CLAMP_DEG, _TILT_CLAMP_DEG)
    return np.stack([u, v, alpha, depth, tilt], axis=1)


def perturb(wp: WorldPose, g: ProjectionGeometry, nl: NoiseLevel,
            rng: np.random.Generator) -> WorldPose:
    """Noisy annotation of a world pose; identity when eta is zero."""
    ip = world_to_image_pose(wp, g)
    noisy = perturb_image_pose(ip, nl, rng)
    return image_to_world_pose(noisy, g, roll_deg=wp.roll_deg)


def derived_seed(master_seed: int, image_id: str, k_index: int) -> int:
    """Stable per-annotation seed: hash of (master seed, image id, draw index)."""
    payload = f"{master_seed}:{image_id}:{k_index}".encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")


@dataclass
class Annotation:
    world_pose: WorldPose
    image_pose: ImagePose
    eta: float
    seed: int

    def to_json(self) -> dict:
        return {
            "world_pose": self.world_pose.to_json(),
            "image_pose": self.image_pose.to_json(),
            "eta": self.eta,
            "seed": self.seed,
        }

    @staticmethod
    def from_json(d: dict) -> "Annotation":
        return Annotation(
            world_pose=WorldPose.from_json(d["world_pose"]),
            image_pose=ImagePose.from_json(d["image_pose"]),
            eta=float(d["eta"]),
            seed=int(d["seed"]),
        )


def annotate_dataset(items, g: ProjectionGeometry, nl: NoiseLevel,
                     annotations_per_image: int,
                     master_seed: int) -> dict[str, list[Annotation]]:
    """k independent noisy annotations for each (image_id, WorldPose) item.

    Each annotation uses its own derived seed, so any subset can be
    regenerated independently and in parallel.
    """
    if annotations_per_image < 1:
        raise ValueError("need at least one annotation per image")
    out: dict[str, list[Annotation]] = {}
    for image_id, wp in items:
        anns = []
        for j in range(annotations_per_image):
            seed = derived_seed(master_seed, image_id, j)
            rng = np.random.default_rng(seed)
            noisy = perturb(wp, g, nl, rng)
            anns.append(Annotation(
                world_pose=noisy,
                image_pose=world_to_image_pose(noisy, g),
                eta=nl.eta,
                seed=seed,
            ))
        out[image_id] = anns
    return out


def save_annotations(path, annotations: dict[str, list[Annotation]]) -> None:
    payload = {
        image_id: [a.to_json() for a in anns]
        for image_id, anns in sorted(annotations.items())
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1))


def load_annotations(path) -> dict[str, list[Annotation]]:
    payload = json.loads(Path(path).read_text())
    return {
        image_id: [Annotation.from_json(a) for a in anns]
        for image_id, anns in payload.items()
    }
