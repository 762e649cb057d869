"""Cone-beam projection geometry and pose representations.

All lengths are millimeters, all angles degrees. Image coordinates follow
the raster convention: pixel (0, 0) is the top-left pixel center, +u goes
right, +v goes down, and the forward angle is measured clockwise-positive
in that frame (standard atan2 on raster axes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Vec3 = np.ndarray  # shape (3,), float64
Mat3 = np.ndarray  # shape (3, 3), float64

_ORTHO_TOL = 1e-9


class GeometryError(Exception):
    pass


class RayParallelToDetector(GeometryError):
    """Ray direction is (numerically) parallel to the detector plane."""


class DegenerateAxis(GeometryError):
    """Instrument axis is aligned with the viewing ray; projection collapses."""


class InvalidTilt(GeometryError):
    """Tilt outside the representable [-90, 90] degree range."""


def vec3(x, y=None, z=None) -> Vec3:
    if y is None:
        return np.asarray(x, dtype=np.float64).reshape(3).copy()
    return np.array([x, y, z], dtype=np.float64)


def unit(v: Vec3) -> Vec3:
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def wrap_angle_deg(a: float) -> float:
    """Wrap an angle to the half-open interval (-180, 180]."""
    w = math.fmod(float(a), 360.0)
    if w > 180.0:
        w -= 360.0
    elif w <= -180.0:
        w += 360.0
    return w


def rotation_about_axis(axis: Vec3, angle_deg: float) -> Mat3:
    """Rodrigues rotation matrix for a rotation of angle_deg about axis."""
    k = unit(axis)
    th = math.radians(angle_deg)
    kx = np.array(
        [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]],
        dtype=np.float64,
    )
    return np.eye(3) + math.sin(th) * kx + (1.0 - math.cos(th)) * (kx @ kx)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation pair; composition applies `other` first."""

    rotation: Mat3
    translation: Vec3

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if not np.allclose(r @ r.T, np.eye(3), atol=_ORTHO_TOL):
            raise ValueError("rotation part is not orthonormal within 1e-9")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", vec3(self.translation))

    def apply(self, p: Vec3) -> Vec3:
        return self.rotation @ np.asarray(p, dtype=np.float64) + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))


@dataclass
class WorldPose:
    """5-DOF instrument pose: head-point position plus axis direction.

    origin is the screw-head point (the pivot-calibration origin); axis is
    the unit direction from head toward tip. roll only matters for visual
    overlay rendering and never enters any error metric.
    """

    origin: Vec3
    axis: Vec3
    roll_deg: float = 0.0

    def __post_init__(self):
        self.origin = vec3(self.origin)
        ax = np.asarray(self.axis, dtype=np.float64)
        n = float(np.linalg.norm(ax))
        if not math.isfinite(n) or abs(n - 1.0) > 1e-6:
            raise ValueError(f"axis must be a unit vector (|axis| = {n:.6g})")
        self.axis = ax / n
        r = wrap_angle_deg(self.roll_deg)
        self.roll_deg = -180.0 if r == 180.0 else r  # roll lives in [-180, 180)

    def tip(self, length_mm: float) -> Vec3:
        return self.origin + length_mm * self.axis

    def to_json(self) -> dict:
        return {
            "origin": [float(x) for x in self.origin],
            "axis": [float(x) for x in self.axis],
            "roll_deg": float(self.roll_deg),
        }

    @staticmethod
    def from_json(d: dict) -> "WorldPose":
        return WorldPose(vec3(d["origin"]), vec3(d["axis"]), float(d.get("roll_deg", 0.0)))


@dataclass
class ImagePose:
    """Image-space pose: projected origin, forward angle, depth and tilt.

    tilt_deg is the angle between the instrument axis and the detector
    plane, signed: positive when the axis leans from the source toward the
    detector. The sign doubles as the out-of-plane flag that makes the
    5-DOF inverse well-defined; it is serialized explicitly as
    ``out_of_plane_sign``.
    """

    u: float
    v: float
    alpha_deg: float
    depth_mm: float
    tilt_deg: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.u) and math.isfinite(self.v)):
            raise ValueError("x_instr must be finite")
        if self.depth_mm <= 0.0:
            raise ValueError("depth must be positive")
        self.alpha_deg = wrap_angle_deg(self.alpha_deg)

    @property
    def x_instr(self) -> tuple[float, float]:
        return (self.u, self.v)

    @property
    def out_of_plane_sign(self) -> int:
        return -1 if self.tilt_deg < 0.0 else 1

    def replace(self, **kw) -> "ImagePose":
        d = dict(u=self.u, v=self.v, alpha_deg=self.alpha_deg,
                 depth_mm=self.depth_mm, tilt_deg=self.tilt_deg)
        d.update(kw)
        return ImagePose(**d)

    def to_json(self) -> dict:
        return {
            "x_instr": [float(self.u), float(self.v)],
            "alpha_deg": float(self.alpha_deg),
            "depth_mm": float(self.depth_mm),
            "tilt_deg": float(self.tilt_deg),
            "out_of_plane_sign": self.out_of_plane_sign,
        }

    @staticmethod
    def from_json(d: dict) -> "ImagePose":
        u, v = d["x_instr"]
        return ImagePose(float(u), float(v), float(d["alpha_deg"]),
                         float(d["depth_mm"]), float(d["tilt_deg"]))


@dataclass
class ProjectionGeometry:
    """Cone-beam camera: point source plus a planar pixel detector.

    detector_origin is the 3D center of pixel (0, 0); detector_u and
    detector_v are unit vectors along the pixel rows/columns, so the 3D
    position of continuous pixel (u, v) is
    ``detector_origin + pixel_spacing * (u * detector_u + v * detector_v)``.
    """

    source: Vec3
    detector_origin: Vec3
    detector_u: Vec3
    detector_v: Vec3
    pixel_spacing: float
    image_width: int
    image_height: int

    def __post_init__(self):
        self.source = vec3(self.source)
        self.detector_origin = vec3(self.detector_origin)
        self.detector_u = vec3(self.detector_u)
        self.detector_v = vec3(self.detector_v)
        for name in ("detector_u", "detector_v"):
            if abs(np.linalg.norm(getattr(self, name)) - 1.0) > 1e-9:
                raise ValueError(f"{name} must be a unit vector")
        if abs(float(self.detector_u @ self.detector_v)) > _ORTHO_TOL:
            raise ValueError("detector_u and detector_v must be orthogonal")
        if self.pixel_spacing <= 0:
            raise ValueError("pixel_spacing must be positive")
        n = self.normal
        off = float((self.source - self.detector_origin) @ n)
        if abs(off) < 1e-9:
            raise ValueError("source lies on the detector plane")
        # principal ray must land inside the image rectangle
        pu, pv = self.principal_point
        if not (0.0 <= pu <= self.image_width - 1 and 0.0 <= pv <= self.image_height - 1):
            raise ValueError("principal ray misses the image rectangle")

    @property
    def normal(self) -> Vec3:
        """Unit detector normal oriented from the source toward the detector."""
        n = np.cross(self.detector_u, self.detector_v)
        if float((self.detector_origin - self.source) @ n) < 0.0:
            n = -n
        return n

    @property
    def source_detector_distance(self) -> float:
        return float((self.detector_origin - self.source) @ self.normal)

    @property
    def principal_point(self) -> tuple[float, float]:
        n = np.cross(self.detector_u, self.detector_v)
        d = float((self.detector_origin - self.source) @ n)
        foot = self.source + d * n
        rel = foot - self.detector_origin
        return (
            float(rel @ self.detector_u) / self.pixel_spacing,
            float(rel @ self.detector_v) / self.pixel_spacing,
        )

    def pixel_to_world(self, u: float, v: float) -> Vec3:
        return (self.detector_origin
                + self.pixel_spacing * (u * self.detector_u + v * self.detector_v))

    def ray_direction(self, u: float, v: float) -> Vec3:
        """Unit direction of the viewing ray through continuous pixel (u, v)."""
        return unit(self.pixel_to_world(u, v) - self.source)

    def to_json(self) -> dict:
        return {
            "source": [float(x) for x in self.source],
            "detector_origin": [float(x) for x in self.detector_origin],
            "detector_u": [float(x) for x in self.detector_u],
            "detector_v": [float(x) for x in self.detector_v],
            "pixel_spacing": float(self.pixel_spacing),
            "image_width": int(self.image_width),
            "image_height": int(self.image_height),
        }

    @staticmethod
    def from_json(d: dict) -> "ProjectionGeometry":
        return ProjectionGeometry(
            source=vec3(d["source"]),
            detector_origin=vec3(d["detector_origin"]),
            detector_u=vec3(d["detector_u"]),
            detector_v=vec3(d["detector_v"]),
            pixel_spacing=float(d["pixel_spacing"]),
            image_width=int(d["image_width"]),
            image_height=int(d["image_height"]),
        )


def default_geometry(image_width: int = 256, image_height: int = 256,
                     pixel_spacing: float = 1.0,
                     source_detector_mm: float = 1000.0,
                     source_isocenter_mm: float = 500.0) -> ProjectionGeometry:
    """Desk-scale c-arm stand-in: magnification 2 at the isocenter.

    World frame: isocenter at the origin, source on -z, detector plane at
    z = source_detector_mm - source_isocenter_mm, +x right, +y image-down.
    """
    src = vec3(0.0, 0.0, -source_isocenter_mm)
    plane_z = source_detector_mm - source_isocenter_mm
    cu = (image_width - 1) / 2.0
    cv = (image_height - 1) / 2.0
    det0 = vec3(-cu * pixel_spacing, -cv * pixel_spacing, plane_z)
    return ProjectionGeometry(
        source=src,
        detector_origin=det0,
        detector_u=vec3(1.0, 0.0, 0.0),
        detector_v=vec3(0.0, 1.0, 0.0),
        pixel_spacing=pixel_spacing,
        image_width=image_width,
        image_height=image_height,
    )


def rotate_geometry(g: ProjectionGeometry, axis: Vec3, angle_deg: float,
                    center: Vec3 | None = None) -> ProjectionGeometry:
    """Rigidly rotate source and detector about an axis through `center`."""
    c = np.zeros(3) if center is None else vec3(center)
    r = rotation_about_axis(axis, angle_deg)

    def rot(p):
        return r @ (vec3(p) - c) + c

    return ProjectionGeometry(
        source=rot(g.source),
        detector_origin=rot(g.detector_origin),
        detector_u=r @ g.detector_u,
        detector_v=r @ g.detector_v,
        pixel_spacing=g.pixel_spacing,
        image_width=g.image_width,
        image_height=g.image_height,
    )


def project_point(p: Vec3, g: ProjectionGeometry) -> tuple[float, float]:
    """Project a world point onto the detector; continuous pixel coords.

    Intersects the ray from the source through p with the detector plane.
    Raises RayParallelToDetector when the ray cannot reach the plane.
    """
    p = np.asarray(p, dtype=np.float64)
    n = g.normal
    d = p - g.source
    denom = float(d @ n)
    if abs(denom) < 1e-12:
        raise RayParallelToDetector("ray from source through point is parallel to detector")
    t = float((g.detector_origin - g.source) @ n) / denom
    hit = g.source + t * d
    rel = hit - g.detector_origin
    return (
        float(rel @ g.detector_u) / g.pixel_spacing,
        float(rel @ g.detector_v) / g.pixel_spacing,
    )


def project_points(pts: np.ndarray, g: ProjectionGeometry) -> np.ndarray:
    """Vectorized project_point for an (N, 3) array; returns (N, 2) pixels."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    n = g.normal
    d = pts - g.source
    denom = d @ n
    if np.any(np.abs(denom) < 1e-12):
        raise RayParallelToDetector("a ray is parallel to the detector")
    t = float((g.detector_origin - g.source) @ n) / denom
    hits = g.source + t[:, None] * d
    rel = hits - g.detector_origin
    return np.stack(
        [rel @ g.detector_u, rel @ g.detector_v], axis=1
    ) / g.pixel_spacing


_AXIS_PROBE_MM = 10.0  # lever arm used to measure the projected axis angle


def world_to_image_pose(wp: WorldPose, g: ProjectionGeometry) -> ImagePose:
    """Ground-truth image pose of a world pose under a projection geometry."""
    u0, v0 = project_point(wp.origin, g)
    u1, v1 = project_point(wp.origin + _AXIS_PROBE_MM * wp.axis, g)
    du, dv = u1 - u0, v1 - v0
    if math.hypot(du, dv) < 1e-6:
        raise DegenerateAxis("axis projects to a point (aligned with the viewing ray)")
    alpha = math.degrees(math.atan2(dv, du))
    depth = float(np.linalg.norm(wp.origin - g.source))
    # tilt = 90 deg minus the axis/normal angle, i.e. asin(axis . n), signed
    s = float(np.clip(wp.axis @ g.normal, -1.0, 1.0))
    tilt = math.degrees(math.asin(s))
    return ImagePose(u0, v0, wrap_angle_deg(alpha), depth, tilt)


def image_to_world_pose(ip: ImagePose, g: ProjectionGeometry,
                        roll_deg: float = 0.0) -> WorldPose:
    """Invert world_to_image_pose.

    The axis is recovered so that its central-projection direction at the
    recovered origin has forward angle alpha exactly, its out-of-plane
    component is sin(tilt), and the projected direction sign is preserved
    (positive root of the resulting quadratic). For extreme tilts combined
    with strongly off-axis viewing rays the quadratic can lose its real
    root; the discriminant is then clamped to zero, which yields the
    closest realizable axis.
    """
    if abs(ip.tilt_deg) > 90.0:
        raise InvalidTilt(f"|tilt| = {abs(ip.tilt_deg):.3f} exceeds 90 degrees")
    if ip.depth_mm <= 0.0:
        raise ValueError("depth must be positive")
    n = g.normal
    r_hat = g.ray_direction(ip.u, ip.v)
    origin = g.source + ip.depth_mm * r_hat

    s = math.sin(math.radians(ip.tilt_deg))
    cos_t = math.cos(math.radians(ip.tilt_deg))
    rn = float(r_hat @ n)
    qu = s * float(r_hat @ g.detector_u) / rn
    qv = s * float(r_hat @ g.detector_v) / rn
    eu = math.cos(math.radians(ip.alpha_deg))
    ev = math.sin(math.radians(ip.alpha_deg))
    qe = qu * eu + qv * ev
    disc = qe * qe - (qu * qu + qv * qv) + cos_t * cos_t
    lam = -qe + math.sqrt(max(disc, 0.0))
    c1 = qu + lam * eu
    c2 = qv + lam * ev
    axis = c1 * g.detector_u + c2 * g.detector_v + s * n
    return WorldPose(origin, unit(axis), roll_deg)


def position_error_mm(gt: WorldPose, est_px: tuple[float, float],
                      g: ProjectionGeometry) -> float:
    """Position error on the detector-parallel plane through the instrument.

    Back-projects the estimated pixel along its viewing ray onto the plane
    that contains gt.origin and is parallel to the detector, and returns
    the Euclidean mm distance to gt.origin on that plane.
    """
    u, v = est_px
    if not (math.isfinite(u) and math.isfinite(v)):
        raise ValueError("estimated pixel must be finite")
    n = g.normal
    d = g.pixel_to_world(u, v) - g.source
    denom = float(d @ n)
    if abs(denom) < 1e-12:
        raise RayParallelToDetector("estimate ray cannot intersect the instrument plane")
    t = float((gt.origin - g.source) @ n) / denom
    hit = g.source + t * d
    return float(np.linalg.norm(hit - gt.origin))


def forward_angle_error(gt_alpha_deg: float, est_alpha_deg: float) -> float:
    """Signed forward-angle error (estimate minus ground truth), wrapped."""
    return wrap_angle_deg(est_alpha_deg - gt_alpha_deg)
