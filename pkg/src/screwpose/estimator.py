"""Iterative pose estimation: patchify, regress, reconstruct, repeat.

The geometric reconstruction fits a total-least-squares line through each
keypoint triple and intersects them; the intersection is the new origin
estimate and the axis line's direction gives the forward angle. Depth and
tilt pass through unchanged, they are not estimated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import ImagePose, wrap_angle_deg
from .patchify import (
    EstimateOutOfImage,
    PatchFrame,
    PatchSpec,
    extract_patch,
    patch_to_image_coords,
)


class DegeneratePoints(Exception):
    """All points coincide; no line direction exists."""


class NearParallel(Exception):
    """Fitted lines meet below the minimum angle; intersection is unstable."""


@dataclass
class Line:
    point: np.ndarray      # (2,)
    direction: np.ndarray  # (2,), unit

    def closest_point_to(self, q) -> np.ndarray:
        rel = np.asarray(q, dtype=np.float64) - self.point
        return self.point + float(rel @ self.direction) * self.direction


def fit_line(points) -> Line:
    """Total-least-squares line; direction points from first toward last."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] < 2:
        raise DegeneratePoints("need at least two points")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    if np.abs(centered).max() < 1e-9:
        raise DegeneratePoints("all points coincide within 1e-9")
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    d = vt[0]
    if float(d @ (pts[-1] - pts[0])) < 0.0:
        d = -d
    return Line(centroid, d / np.linalg.norm(d))


def line_angle_deg(a: Line, b: Line) -> float:
    """Unsigned angle between two lines in [0, 90] degrees."""
    cross = abs(a.direction[0] * b.direction[1]
                - a.direction[1] * b.direction[0])
    return math.degrees(math.asin(min(cross, 1.0)))


def intersect_lines(a: Line, b: Line, min_angle_deg: float = 10.0) -> np.ndarray:
    """Unique intersection point; NearParallel below the angle threshold."""
    if line_angle_deg(a, b) < min_angle_deg:
        raise NearParallel(
            f"lines meet at {line_angle_deg(a, b):.2f} deg "
            f"(threshold {min_angle_deg})")
    m = np.column_stack([a.direction, -b.direction])
    t, _ = np.linalg.solve(m, b.point - a.point)
    return a.point + t * a.direction


def reconstruct(kp, frame: PatchFrame, current: ImagePose,
                min_angle_deg: float = 10.0) -> tuple[ImagePose, bool]:
    """Map keypoints back to the image and rebuild (x_instr, alpha).

    kp is a KeypointSet or any (6, 2) / flat-12 array in normalized patch
    coordinates, ordered A1 A2 A3 B1 B2 B3. Returns the updated pose
    (depth and tilt carried over from `current`) plus a flag that is True
    when the near-parallel fallback was taken.
    """
    pts = np.asarray(getattr(kp, "points", kp), dtype=np.float64).reshape(6, 2)
    if not np.all(np.isfinite(pts)):
        raise ValueError("keypoints must be finite")
    img_pts = patch_to_image_coords(pts, frame)
    line_a = fit_line(img_pts[:3])
    line_b = fit_line(img_pts[3:])
    fallback = False
    try:
        x_instr = intersect_lines(line_a, line_b, min_angle_deg)
    except NearParallel:
        x_instr = line_a.closest_point_to(img_pts[3:].mean(axis=0))
        fallback = True
    alpha = math.degrees(math.atan2(line_a.direction[1], line_a.direction[0]))
    pose = current.replace(u=float(x_instr[0]), v=float(x_instr[1]),
                           alpha_deg=wrap_angle_deg(alpha))
    return pose, fallback


@dataclass
class EstimatorConfig:
    model: object                      # anything with predict(Patch) -> (12,)
    patch_spec: PatchSpec = field(default_factory=PatchSpec)
    iterations: int = 3
    min_line_angle_deg: float = 10.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("need at least one iteration")


@dataclass
class EstimateResult:
    pose: ImagePose
    trace: list          # ImagePose per completed iteration
    fallback_used: bool  # any iteration used the near-parallel fallback
    aborted: bool        # estimate left the image before finishing


def estimate(img, initial: ImagePose, cfg: EstimatorConfig) -> EstimateResult:
    """Run the iterative refinement loop from an initial estimate."""
    current = initial
    trace: list[ImagePose] = []
    fallback_used = False
    for _ in range(cfg.iterations):
        try:
            patch = extract_patch(img, current, cfg.patch_spec)
        except EstimateOutOfImage:
            return EstimateResult(current, trace, fallback_used, aborted=True)
        kp = cfg.model.predict(patch)
        current, fallback = reconstruct(kp, patch.frame, current,
                                        cfg.min_line_angle_deg)
        fallback_used = fallback_used or fallback
        trace.append(current)
    return EstimateResult(current, trace, fallback_used, aborted=False)
