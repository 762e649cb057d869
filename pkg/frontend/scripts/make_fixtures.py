"""Generate cross-language test fixtures for the frontend suite.

Run from the repository root after installing the backend package:

    python3 frontend/scripts/make_fixtures.py

The frontend's projection and overlay math must agree with the backend to
sub-pixel precision; these fixtures freeze backend-computed expectations.
"""

import json
from pathlib import Path

import numpy as np

from screwpose.geometry import (
    WorldPose,
    default_geometry,
    project_point,
    rotate_geometry,
    unit,
    vec3,
    world_to_image_pose,
)
from screwpose.phantom import ScrewModel, local_frame, screw_outline

OUT = Path(__file__).resolve().parents[1] / "tests" / "fixtures"


def projection_cases():
    rng = np.random.default_rng(90)
    base = default_geometry()
    geoms = [
        base,
        rotate_geometry(base, vec3(0, 1, 0), 60.0),
        rotate_geometry(base, vec3(1, 0.5, 0.25), -35.0),
    ]
    cases = []
    for g in geoms:
        pts = rng.uniform(-45, 45, size=(12, 3))
        pixels = [list(project_point(p, g)) for p in pts]
        cases.append({
            "geometry": g.to_json(),
            "points": pts.tolist(),
            "pixels": pixels,
        })
    return cases


def outline_case():
    g = default_geometry()
    screw = ScrewModel()
    outline = screw_outline(screw)
    rng = np.random.default_rng(91)
    poses = []
    projected = []
    for _ in range(4):
        origin = rng.uniform(-25, 25, size=3)
        axis = unit(rng.normal(size=3))
        if abs(axis[2]) > 0.8:  # keep the screw visible side-on
            axis = unit(vec3(axis[0], axis[1], 0.4 * np.sign(axis[2])))
        roll = float(rng.uniform(-180, 180))
        wp = WorldPose(origin, axis, roll)
        frame = local_frame(wp.axis, wp.roll_deg)
        pts3d = wp.origin[None, :] + outline[:, 0:1] * frame[0][None, :] \
            + outline[:, 1:2] * frame[1][None, :]
        projected.append([list(project_point(p, g)) for p in pts3d])
        poses.append(wp.to_json())
    return {
        "geometry": g.to_json(),
        "outline": outline.tolist(),
        "poses": poses,
        "projected": projected,
    }


def selftest_case():
    base = default_geometry()
    second = rotate_geometry(base, base.detector_v, 60.0)
    rng = np.random.default_rng(92)
    origin = rng.uniform(-20, 20, size=3)
    axis = unit(vec3(0.8, 0.5, 0.33))
    wp = WorldPose(origin, axis, 12.0)
    views = [base, second]
    return {
        "views": [g.to_json() for g in views],
        "pose": wp.to_json(),
        "image_poses": [world_to_image_pose(wp, g).to_json() for g in views],
    }


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    fixtures = {
        "projection_cases": projection_cases(),
        "outline_case": outline_case(),
        "selftest_case": selftest_case(),
    }
    path = OUT / "projection_cases.json"
    path.write_text(json.dumps(fixtures, indent=1, sort_keys=True))
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
