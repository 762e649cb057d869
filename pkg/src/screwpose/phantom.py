"""Procedural anatomy volumes and the parametric screw instrument.

The anatomy stands in for scanned CT data: an ellipsoidal bone shell
filled with soft tissue and seeded ellipsoidal inclusions, fully
determined by an integer seed. The screw is the union of two capped
cylinders sharing the instrument axis; its origin sits at the junction
between head and shaft, with the axis pointing toward the tip.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    DegenerateAxis,
    ProjectionGeometry,
    Vec3,
    WorldPose,
    project_points,
    rotation_about_axis,
    unit,
    vec3,
)


@dataclass
class Volume:
    """Attenuation volume; data[ix, iy, iz] holds mu (1/mm) at a voxel center."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: Vec3
    data: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = vec3(self.origin)
        if any(d <= 0 for d in self.dims) or any(s <= 0 for s in self.spacing):
            raise ValueError("dims and spacing must be positive")
        if self.data.shape != self.dims:
            raise ValueError(f"data shape {self.data.shape} != dims {self.dims}")
        if self.data.min() < 0:
            raise ValueError("attenuation must be non-negative")

    @property
    def extent_min(self) -> Vec3:
        return self.origin

    @property
    def extent_max(self) -> Vec3:
        return self.origin + np.array(self.spacing) * (np.array(self.dims) - 1)

    def save(self, prefix: str | Path) -> None:
        """Write <prefix>.json header plus <prefix>.raw voxels (LE f32, x-fastest)."""
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        header = {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "origin": [float(x) for x in self.origin],
            "seed": self.seed,
        }
        prefix.with_suffix(".json").write_text(
            json.dumps(header, sort_keys=True, indent=1))
        self.data.astype("<f4").flatten(order="F").tofile(prefix.with_suffix(".raw"))

    @staticmethod
    def load(prefix: str | Path) -> "Volume":
        prefix = Path(prefix)
        header = json.loads(prefix.with_suffix(".json").read_text())
        dims = tuple(header["dims"])
        data = np.fromfile(prefix.with_suffix(".raw"), dtype="<f4").reshape(
            dims, order="F")
        return Volume(dims, tuple(header["spacing"]), vec3(header["origin"]),
                      data, header.get("seed"))


@dataclass
class AnatomySpec:
    """Recipe for one procedural anatomy; identical seeds give identical voxels."""

    seed: int
    shell_semi_axes: tuple[float, float, float] = (55.0, 45.0, 40.0)
    shell_thickness: float = 6.0
    mu_bone: float = 0.06
    mu_soft: float = 0.02
    n_inclusions: int = 40
    inclusion_radius: tuple[float, float] = (2.0, 8.0)
    inclusion_contrast: tuple[float, float] = (0.0, 2.0)
    dims: tuple[int, int, int] = (128, 128, 128)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "shell_semi_axes": list(self.shell_semi_axes),
            "shell_thickness": self.shell_thickness,
            "mu_bone": self.mu_bone,
            "mu_soft": self.mu_soft,
            "n_inclusions": self.n_inclusions,
            "inclusion_radius": list(self.inclusion_radius),
            "inclusion_contrast": list(self.inclusion_contrast),
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "center": list(self.center),
        }

    @staticmethod
    def from_json(d: dict) -> "AnatomySpec":
        kw = dict(d)
        for key in ("shell_semi_axes", "inclusion_radius", "inclusion_contrast",
                    "dims", "spacing", "center"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return AnatomySpec(**kw)


def generate_anatomy(spec: AnatomySpec) -> Volume:
    """Build the procedural anatomy volume for a spec, deterministic in seed."""
    rng = np.random.default_rng(spec.seed)
    nx, ny, nz = spec.dims
    sp = np.array(spec.spacing)
    center = np.array(spec.center, dtype=np.float64)
    origin = center - sp * (np.array(spec.dims) - 1) / 2.0

    xs = origin[0] + sp[0] * np.arange(nx)
    ys = origin[1] + sp[1] * np.arange(ny)
    zs = origin[2] + sp[2] * np.arange(nz)
    gx, gy, gz = np.meshgrid(xs - center[0], ys - center[1], zs - center[2],
                             indexing="ij")

    ax, ay, az = spec.shell_semi_axes
    t = spec.shell_thickness
    rho_outer = (gx / ax) ** 2 + (gy / ay) ** 2 + (gz / az) ** 2
    inner = np.array([max(ax - t, 0.0), max(ay - t, 0.0), max(az - t, 0.0)])
    mu = np.zeros(spec.dims, dtype=np.float64)
    outside = rho_outer > 1.0
    if t > 0 and inner.min() > 0:
        rho_inner = (gx / inner[0]) ** 2 + (gy / inner[1]) ** 2 + (gz / inner[2]) ** 2
        mu[rho_inner <= 1.0] = spec.mu_soft
        mu[(rho_inner > 1.0) & ~outside] = spec.mu_bone
        soft_mask = rho_inner <= 1.0
    else:
        mu[~outside] = spec.mu_soft
        soft_mask = ~outside

    r_lo, r_hi = spec.inclusion_radius
    c_lo, c_hi = spec.inclusion_contrast
    for _ in range(spec.n_inclusions):
        # center uniform in the soft-tissue ellipsoid (unit ball scaled by axes)
        while True:
            p = rng.uniform(-1.0, 1.0, size=3)
            if p @ p <= 1.0:
                break
        c_incl = center + p * inner if t > 0 else center + p * np.array([ax, ay, az])
        r = rng.uniform(r_lo, r_hi)
        semi = r * rng.uniform(0.6, 1.4, size=3)
        contrast = rng.uniform(c_lo, c_hi)
        lo = np.maximum(((c_incl - semi - origin) / sp).astype(int), 0)
        hi = np.minimum(((c_incl + semi - origin) / sp).astype(int) + 2,
                        np.array(spec.dims))
        sl = tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))
        if any(s.start >= s.stop for s in sl):
            continue
        d2 = (((gx[sl] + center[0] - c_incl[0]) / semi[0]) ** 2
              + ((gy[sl] + center[1] - c_incl[1]) / semi[1]) ** 2
              + ((gz[sl] + center[2] - c_incl[2]) / semi[2]) ** 2)
        blob = (d2 <= 1.0) & soft_mask[sl]
        mu[sl][blob] = contrast * spec.mu_soft

    np.clip(mu, 0.0, spec.mu_bone, out=mu)
    return Volume(spec.dims, spec.spacing, origin, mu.astype(np.float32),
                  seed=spec.seed)


def uniform_volume(mu: float, side_mm: float = 100.0, n: int = 51,
                   center=(0.0, 0.0, 0.0)) -> Volume:
    """Axis-aligned cube of constant attenuation, for calibration tests."""
    spacing = side_mm / (n - 1)
    origin = np.array(center, dtype=np.float64) - side_mm / 2.0
    data = np.full((n, n, n), mu, dtype=np.float32)
    return Volume((n, n, n), (spacing,) * 3, origin, data)


# --------------------------------------------------------------- the screw

KEYPOINT_NAMES = ("A1", "A2", "A3", "B1", "B2", "B3")


@dataclass
class ScrewModel:
    """Two capped coaxial cylinders: head at x in [-head_length, 0], shaft after."""

    shaft_length: float = 9.0
    shaft_radius: float = 1.0
    head_radius: float = 2.0
    head_length: float = 2.0
    mu_metal: float = 2.0
    keypoint_offset: float = 3.0  # the cross-point spacing d

    def __post_init__(self):
        if min(self.shaft_length, self.shaft_radius, self.head_radius,
               self.head_length, self.mu_metal, self.keypoint_offset) <= 0:
            raise ValueError("all screw dimensions must be positive")
        if self.head_radius < self.shaft_radius:
            raise ValueError("head_radius must be >= shaft_radius")

    def to_json(self) -> dict:
        return {
            "shaft_length": self.shaft_length,
            "shaft_radius": self.shaft_radius,
            "head_radius": self.head_radius,
            "head_length": self.head_length,
            "mu_metal": self.mu_metal,
            "keypoint_offset": self.keypoint_offset,
        }

    @staticmethod
    def from_json(d: dict) -> "ScrewModel":
        return ScrewModel(**d)


def local_frame(axis: Vec3, roll_deg: float = 0.0) -> np.ndarray:
    """Right-handed frame (rows ex, ey, ez) with ex = axis.

    ey starts at a deterministic perpendicular and is rolled about the axis;
    the UI uses the same construction so overlays are reproducible.
    """
    ex = unit(axis)
    ref = np.zeros(3)
    ref[int(np.argmin(np.abs(ex)))] = 1.0
    ey = unit(np.cross(ex, ref))
    if roll_deg != 0.0:
        ey = rotation_about_axis(ex, roll_deg) @ ey
    ez = np.cross(ex, ey)
    return np.stack([ex, ey, ez])


@dataclass
class ScrewKeypoints:
    """The six regression anchors: three on the axis, three on a cross line."""

    local: np.ndarray   # (6, 3) in the instrument frame (x = axis, y = cross)
    world: np.ndarray   # (6, 3) mm
    pixels: np.ndarray  # (6, 2) detector pixels


_MIN_VIEW_ANGLE_DEG = 2.0


def screw_keypoints(s: ScrewModel, wp: WorldPose,
                    g: ProjectionGeometry) -> ScrewKeypoints:
    """Keypoint construction: axis points plus an asymmetric cross line.

    The cross line runs through the origin along unit(axis x view_ray) with
    offsets {-d, d/2, d}, so both fitted image lines pass through the
    projected origin and the point set has no 180-degree symmetry.
    """
    view = unit(wp.origin - g.source)
    w = np.cross(wp.axis, view)
    wn = float(np.linalg.norm(w))
    if wn < math.sin(math.radians(_MIN_VIEW_ANGLE_DEG)):
        raise DegenerateAxis("axis within 2 degrees of the viewing ray")
    w = w / wn

    length = s.shaft_length
    d = s.keypoint_offset
    world = np.stack([
        wp.origin,
        wp.origin + 0.5 * length * wp.axis,
        wp.origin + length * wp.axis,
        wp.origin - d * w,
        wp.origin + 0.5 * d * w,
        wp.origin + d * w,
    ])
    local = np.array([
        [0.0, 0.0, 0.0],
        [0.5 * length, 0.0, 0.0],
        [length, 0.0, 0.0],
        [0.0, -d, 0.0],
        [0.0, 0.5 * d, 0.0],
        [0.0, d, 0.0],
    ])
    pixels = project_points(world, g)
    return ScrewKeypoints(local=local, world=world, pixels=pixels)


def _interval_intersection_length(lo_a, hi_a, lo_b, hi_b):
    lo = np.maximum(lo_a, lo_b)
    hi = np.minimum(hi_a, hi_b)
    return np.maximum(hi - lo, 0.0)


_FAR = 1e30


def _capped_cylinder_chords(o: np.ndarray, d: np.ndarray,
                            x0: float, x1: float, radius: float) -> np.ndarray:
    """Chord lengths of lines (o + t*d) inside a capped x-aligned cylinder."""
    ox, oy, oz = o[:, 0], o[:, 1], o[:, 2]
    dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]

    a = dy * dy + dz * dz
    b = 2.0 * (oy * dy + oz * dz)
    c = oy * oy + oz * oz - radius * radius
    parallel = a < 1e-14
    a_safe = np.where(parallel, 1.0, a)
    disc = b * b - 4.0 * a_safe * c
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    r_lo = np.where(parallel, np.where(c <= 0.0, -_FAR, _FAR),
                    np.where(hit, (-b - sq) / (2.0 * a_safe), _FAR))
    r_hi = np.where(parallel, np.where(c <= 0.0, _FAR, -_FAR),
                    np.where(hit, (-b + sq) / (2.0 * a_safe), -_FAR))

    axial = np.abs(dx) < 1e-14
    dx_safe = np.where(axial, 1.0, dx)
    s_a = (x0 - ox) / dx_safe
    s_b = (x1 - ox) / dx_safe
    s_lo = np.where(axial, np.where((ox >= x0) & (ox <= x1), -_FAR, _FAR),
                    np.minimum(s_a, s_b))
    s_hi = np.where(axial, np.where((ox >= x0) & (ox <= x1), _FAR, -_FAR),
                    np.maximum(s_a, s_b))
    return _interval_intersection_length(r_lo, r_hi, s_lo, s_hi)


def screw_ray_pathlengths(s: ScrewModel, wp: WorldPose,
                          origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Vectorized chord lengths through the screw solid for unit-direction lines.

    Chords are measured along the full line, so the result is invariant
    under ray reversal.
    """
    frame = local_frame(wp.axis)
    o = (np.atleast_2d(origins) - wp.origin) @ frame.T
    d = np.atleast_2d(dirs) @ frame.T
    head = _capped_cylinder_chords(o, d, -s.head_length, 0.0, s.head_radius)
    shaft = _capped_cylinder_chords(o, d, 0.0, s.shaft_length, s.shaft_radius)
    return head + shaft


def screw_ray_pathlength(s: ScrewModel, wp: WorldPose, ray) -> float:
    """Chord length of a single ray (origin, unit direction) inside the screw."""
    origin, direction = ray
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ValueError("ray direction must be a unit vector")
    return float(screw_ray_pathlengths(s, wp, vec3(origin)[None, :],
                                       direction[None, :])[0])


def screw_outline(s: ScrewModel) -> np.ndarray:
    """Closed axial cross-section contour (N, 2) in local (x, y) coordinates.

    Corner vertices of the head and shaft rectangles plus edge midpoints;
    the first vertex is repeated at the end.
    """
    hl, hr = s.head_length, s.head_radius
    sl, sr = s.shaft_length, s.shaft_radius
    corners = [
        (-hl, hr), (0.0, hr), (0.0, sr), (sl, sr),
        (sl, -sr), (0.0, -sr), (0.0, -hr), (-hl, -hr),
    ]
    verts = []
    for i, p in enumerate(corners):
        q = corners[(i + 1) % len(corners)]
        verts.append(p)
        verts.append(((p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0))
    verts.append(verts[0])
    return np.array(verts, dtype=np.float64)
