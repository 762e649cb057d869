import math

import numpy as np
import pytest

from screwpose.geometry import (
    ProjectionGeometry,
    WorldPose,
    default_geometry,
    unit,
    vec3,
)


@pytest.fixture
def geom() -> ProjectionGeometry:
    return default_geometry()


def random_axis(rng: np.random.Generator, g: ProjectionGeometry,
                tilt_max_deg: float = 60.0) -> np.ndarray:
    """Random unit axis whose tilt against the detector plane is bounded."""
    tilt = math.radians(rng.uniform(-tilt_max_deg, tilt_max_deg))
    phi = rng.uniform(0.0, 2.0 * math.pi)
    in_plane = math.cos(phi) * g.detector_u + math.sin(phi) * g.detector_v
    return unit(math.cos(tilt) * in_plane + math.sin(tilt) * g.normal)


def random_pose(rng: np.random.Generator, g: ProjectionGeometry,
                tilt_max_deg: float = 60.0, spread_mm: float = 40.0) -> WorldPose:
    """Random pose near the isocenter, projectable with margin."""
    origin = vec3(rng.uniform(-spread_mm, spread_mm),
                  rng.uniform(-spread_mm, spread_mm),
                  rng.uniform(-spread_mm / 2, spread_mm / 2))
    return WorldPose(origin, random_axis(rng, g, tilt_max_deg))


class OracleRegressor:
    """Plug-in regressor that returns the exact projected keypoints.

    Ignores patch pixels entirely; uses the patch frame to express the
    ground-truth keypoint projections in normalized coordinates.
    """

    def __init__(self, screw, gt_pose: WorldPose, g: ProjectionGeometry):
        from screwpose.phantom import screw_keypoints
        self._kp_px = screw_keypoints(screw, gt_pose, g).pixels

    def predict(self, patch):
        from screwpose.patchify import image_to_patch_coords
        return image_to_patch_coords(self._kp_px, patch.frame).reshape(12)
