"""Radiograph rendering: volume line integrals plus the analytic screw.

Each detector pixel receives the attenuation line integral along the ray
from the x-ray source through that pixel center. The anatomy volume is
integrated by uniform midpoint sampling with trilinear interpolation; the
screw contributes its exact chord length times mu_metal, so instrument
ground truth never suffers from voxelization.

Line integrals are kept in float64 in memory, which makes the
anatomy/screw additivity exact; dataset files store a float32 sidecar and
a 16-bit PNG quantization.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .geometry import ImagePose, ProjectionGeometry, WorldPose, world_to_image_pose
from .phantom import ScrewModel, Volume, screw_ray_pathlengths


class EmptyScene(Exception):
    """The principal ray misses the volume; the geometry is misconfigured."""


@dataclass
class RadiographMeta:
    geometry_id: str
    anatomy_seed: int | None
    world_pose: WorldPose | None
    image_pose: ImagePose | None
    settings_hash: str

    def to_json(self) -> dict:
        return {
            "geometry_id": self.geometry_id,
            "anatomy_seed": self.anatomy_seed,
            "world_pose": self.world_pose.to_json() if self.world_pose else None,
            "image_pose": self.image_pose.to_json() if self.image_pose else None,
            "settings_hash": self.settings_hash,
        }


@dataclass
class RadiographImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width) line integrals, dimensionless
    meta: RadiographMeta

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width):
            raise ValueError("pixel array does not match width/height")


def geometry_id(g: ProjectionGeometry) -> str:
    return hashlib.sha256(
        json.dumps(g.to_json(), sort_keys=True).encode()).hexdigest()[:12]


def settings_hash(g: ProjectionGeometry, screw: ScrewModel | None,
                  step_mm: float) -> str:
    payload = {
        "geometry": g.to_json(),
        "screw": screw.to_json() if screw else None,
        "step_mm": step_mm,
    }
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]


def _ray_grid(g: ProjectionGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Source origins (broadcastable) and unit directions for all pixels."""
    us = np.arange(g.image_width, dtype=np.float64)
    vs = np.arange(g.image_height, dtype=np.float64)
    uu, vv = np.meshgrid(us, vs)  # (H, W)
    det = (g.detector_origin[None, None, :]
           + g.pixel_spacing * (uu[..., None] * g.detector_u[None, None, :]
                                + vv[..., None] * g.detector_v[None, None, :]))
    d = det - g.source[None, None, :]
    d /= np.linalg.norm(d, axis=2, keepdims=True)
    return d.reshape(-1, 3), det.reshape(-1, 3)


def _aabb_entry_exit(source, dirs, lo, hi):
    """Slab intersection: per-ray (t_near, t_far) clipped to t >= 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t0 = (lo[None, :] - source[None, :]) * inv
    t1 = (hi[None, :] - source[None, :]) * inv
    # rays exactly parallel to a slab: inside gives (-inf, inf), outside empty
    par = np.abs(dirs) < 1e-14
    inside = (source[None, :] >= lo[None, :]) & (source[None, :] <= hi[None, :])
    slab_lo = np.where(par, np.where(inside, -np.inf, np.inf),
                       np.minimum(t0, t1))
    slab_hi = np.where(par, np.where(inside, np.inf, -np.inf),
                       np.maximum(t0, t1))
    tmin = np.maximum(slab_lo.max(axis=1), 0.0)
    tmax = slab_hi.min(axis=1)
    return tmin, tmax


def _trilinear(vol: Volume, pts: np.ndarray) -> np.ndarray:
    """Sample mu at world points; zero outside the voxel-center hull."""
    sp = np.asarray(vol.spacing)
    gcoord = (pts - vol.origin[None, :]) / sp[None, :]
    dims = np.asarray(vol.dims)
    valid = np.all((gcoord >= 0.0) & (gcoord <= dims - 1), axis=1)
    gc = np.clip(gcoord, 0.0, (dims - 1) - 1e-9)
    i0 = gc.astype(np.int64)
    i0 = np.minimum(i0, dims - 2)
    f = gc - i0
    nx, ny, nz = vol.dims
    flat = vol.data.reshape(-1)  # C order over (nx, ny, nz): z fastest
    base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    c000 = flat[base]
    c001 = flat[base + 1]
    c010 = flat[base + nz]
    c011 = flat[base + nz + 1]
    c100 = flat[base + ny * nz]
    c101 = flat[base + ny * nz + 1]
    c110 = flat[base + ny * nz + nz]
    c111 = flat[base + ny * nz + nz + 1]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    c00 = c000 * (1 - fz) + c001 * fz
    c01 = c010 * (1 - fz) + c011 * fz
    c10 = c100 * (1 - fz) + c101 * fz
    c11 = c110 * (1 - fz) + c111 * fz
    c0 = c00 * (1 - fy) + c01 * fy
    c1 = c10 * (1 - fy) + c11 * fy
    out = c0 * (1 - fx) + c1 * fx
    out[~valid] = 0.0
    return out


_CHUNK_RAYS = 4096


def render_anatomy(vol: Volume, g: ProjectionGeometry,
                   step_mm: float = 0.5) -> np.ndarray:
    """Line-integral image of the volume alone, (H, W) float64.

    Rays march from entry to exit of the volume's voxel-center hull with a
    per-ray uniform spacing no coarser than step_mm (midpoint rule); the
    summation order along each ray is fixed, so results do not depend on
    any parallel schedule.
    """
    if step_mm <= 0:
        raise ValueError("step must be positive")
    dirs, _ = _ray_grid(g)
    lo = vol.extent_min
    hi = vol.extent_max
    tn, tf = _aabb_entry_exit(g.source, dirs, lo, hi)

    # principal ray sanity check
    n = g.normal
    pn, pf = _aabb_entry_exit(g.source, n[None, :], lo, hi)
    if not pf[0] > pn[0]:
        raise EmptyScene("principal ray does not intersect the volume")

    lengths = np.maximum(tf - tn, 0.0)
    n_samples = np.ceil(lengths / step_mm).astype(np.int64)
    out = np.zeros(dirs.shape[0], dtype=np.float64)
    max_n = int(n_samples.max()) if n_samples.size else 0
    if max_n == 0:
        return out.reshape(g.image_height, g.image_width)

    for start in range(0, dirs.shape[0], _CHUNK_RAYS):
        sl = slice(start, min(start + _CHUNK_RAYS, dirs.shape[0]))
        d = dirs[sl]
        ns = n_samples[sl]
        if ns.max() == 0:
            continue
        m = int(ns.max())
        h = np.where(ns > 0, lengths[sl] / np.maximum(ns, 1), 0.0)
        j = np.arange(m, dtype=np.float64)
        ts = tn[sl][:, None] + (j[None, :] + 0.5) * h[:, None]
        mask = j[None, :] < ns[:, None]
        pts = g.source[None, None, :] + ts[..., None] * d[:, None, :]
        mu = _trilinear(vol, pts.reshape(-1, 3)).reshape(ts.shape)
        mu[~mask] = 0.0
        out[sl] = mu.sum(axis=1) * h
    return out.reshape(g.image_height, g.image_width)


def screw_image(screw: ScrewModel, wp: WorldPose,
                g: ProjectionGeometry) -> np.ndarray:
    """Exact metal contribution: mu_metal times the chord length, per pixel."""
    dirs, _ = _ray_grid(g)
    starts = np.broadcast_to(g.source, dirs.shape)
    chords = screw_ray_pathlengths(screw, wp, starts, dirs)
    return (screw.mu_metal * chords).reshape(g.image_height, g.image_width)


def render(vol: Volume, screw: ScrewModel | None, wp: WorldPose | None,
           g: ProjectionGeometry, step_mm: float = 0.5,
           anatomy_image: np.ndarray | None = None) -> RadiographImage:
    """Full radiograph: anatomy integral plus analytic screw.

    anatomy_image, when given, must be render_anatomy(vol, g, step_mm) and
    is reused as-is; the composition is a plain array sum, so cached and
    uncached paths produce bit-identical pixels.
    """
    if anatomy_image is None:
        anatomy_image = render_anatomy(vol, g, step_mm)
    if screw is not None and wp is not None:
        pixels = anatomy_image + screw_image(screw, wp, g)
        image_pose = world_to_image_pose(wp, g)
    else:
        pixels = anatomy_image.copy()
        image_pose = None
    meta = RadiographMeta(
        geometry_id=geometry_id(g),
        anatomy_seed=vol.seed,
        world_pose=wp,
        image_pose=image_pose,
        settings_hash=settings_hash(g, screw, step_mm),
    )
    return RadiographImage(g.image_width, g.image_height, pixels, meta)


def window_to_8bit(pixels: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Invert and window to uint8: dense structures render bright.

    Rounding is half-up so the mapping is platform independent.
    """
    if not lo < hi:
        raise ValueError("window requires lo < hi")
    arr = np.asarray(pixels, dtype=np.float64)
    val = 255.0 * (1.0 - (arr - lo) / (hi - lo))
    return np.floor(np.clip(val, 0.0, 255.0) + 0.5).clip(0, 255).astype(np.uint8)


def save_png16(path, pixels: np.ndarray, lo: float, hi: float) -> None:
    """Quantize line integrals to 16-bit grayscale PNG over a fixed window."""
    if not lo < hi:
        raise ValueError("quantization requires lo < hi")
    arr = np.asarray(pixels, dtype=np.float64)
    q = np.floor((arr - lo) / (hi - lo) * 65535.0 + 0.5)
    q = np.clip(q, 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(path)


def load_png16(path, lo: float, hi: float) -> np.ndarray:
    q = np.asarray(Image.open(path), dtype=np.float64)
    return lo + q / 65535.0 * (hi - lo)
