"""Standard-pose patches: rotate/crop around a pose estimate.

The patch frame is the similarity transform (rotation by -alpha about the
estimated origin, translation placing it at the anchor) between image
pixel coordinates and patch pixel coordinates. Patch pixel (i, j) has its
center at continuous (i + 0.5, j + 0.5), the patch spans [0, w] x [0, h],
and normalized coordinates map that span onto [-1, 1]^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import ImagePose


class EstimateOutOfImage(Exception):
    """The pose estimate used for patch extraction left the image."""


@dataclass
class PatchSpec:
    patch_width: int = 64
    patch_height: int = 32
    anchor: tuple[float, float] = (0.25, 0.5)
    normalize: bool = True

    def __post_init__(self):
        if self.patch_width <= 0 or self.patch_height <= 0:
            raise ValueError("patch dims must be positive")
        ax, ay = self.anchor
        if not (0.0 < ax < 1.0 and 0.0 < ay < 1.0):
            raise ValueError("anchor must lie strictly inside (0,1)^2")

    def to_json(self) -> dict:
        return {
            "patch_width": self.patch_width,
            "patch_height": self.patch_height,
            "anchor": list(self.anchor),
            "normalize": self.normalize,
        }

    @staticmethod
    def from_json(d: dict) -> "PatchSpec":
        kw = dict(d)
        if "anchor" in kw:
            kw["anchor"] = tuple(kw["anchor"])
        return PatchSpec(**kw)


@dataclass
class PatchFrame:
    """Invertible image<->patch transform for one extraction."""

    u0: float
    v0: float
    alpha_deg: float
    patch_width: int
    patch_height: int
    anchor_px: tuple[float, float]

    def __post_init__(self):
        th = math.radians(self.alpha_deg)
        self._cos = math.cos(th)
        self._sin = math.sin(th)

    def image_to_patch_px(self, pts: np.ndarray) -> np.ndarray:
        """Image pixels (N, 2) to continuous patch pixel coordinates."""
        p = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        du = p[:, 0] - self.u0
        dv = p[:, 1] - self.v0
        # rotation by -alpha maps the instrument direction onto patch +x
        x = self._cos * du + self._sin * dv + self.anchor_px[0]
        y = -self._sin * du + self._cos * dv + self.anchor_px[1]
        return np.stack([x, y], axis=1)

    def patch_px_to_image(self, pts: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        x = p[:, 0] - self.anchor_px[0]
        y = p[:, 1] - self.anchor_px[1]
        u = self._cos * x - self._sin * y + self.u0
        v = self._sin * x + self._cos * y + self.v0
        return np.stack([u, v], axis=1)

    def patch_px_to_norm(self, pts: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        return np.stack([2.0 * p[:, 0] / self.patch_width - 1.0,
                         2.0 * p[:, 1] / self.patch_height - 1.0], axis=1)

    def norm_to_patch_px(self, pts: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        return np.stack([(p[:, 0] + 1.0) * self.patch_width / 2.0,
                         (p[:, 1] + 1.0) * self.patch_height / 2.0], axis=1)


def make_frame(est: ImagePose, spec: PatchSpec) -> PatchFrame:
    return PatchFrame(
        u0=est.u,
        v0=est.v,
        alpha_deg=est.alpha_deg,
        patch_width=spec.patch_width,
        patch_height=spec.patch_height,
        anchor_px=(spec.anchor[0] * spec.patch_width,
                   spec.anchor[1] * spec.patch_height),
    )


def image_to_patch_coords(pt, frame: PatchFrame) -> np.ndarray:
    """Image pixel(s) to normalized patch coordinates in [-1, 1] (unclamped)."""
    return frame.patch_px_to_norm(frame.image_to_patch_px(pt))


def patch_to_image_coords(pt, frame: PatchFrame) -> np.ndarray:
    """Exact inverse of image_to_patch_coords."""
    return frame.patch_px_to_image(frame.norm_to_patch_px(pt))


@dataclass
class Patch:
    pixels: np.ndarray  # (patch_height, patch_width) float64
    frame: PatchFrame


def bilinear_sample(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear lookup with border-value padding (coordinates are clamped)."""
    h, w = image.shape
    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    iu = np.minimum(uc.astype(np.int64), w - 2) if w > 1 else np.zeros_like(uc, int)
    iv = np.minimum(vc.astype(np.int64), h - 2) if h > 1 else np.zeros_like(vc, int)
    fu = uc - iu
    fv = vc - iv
    img = image.astype(np.float64, copy=False)
    top = img[iv, iu] * (1 - fu) + img[iv, iu + 1] * fu
    bot = img[iv + 1, iu] * (1 - fu) + img[iv + 1, iu + 1] * fu
    return top * (1 - fv) + bot * fv


_VARIANCE_FLOOR = 1e-8


def extract_patch(img, est: ImagePose, spec: PatchSpec) -> Patch:
    """Resample the image into the standard-pose patch of an estimate.

    img may be a RadiographImage or a bare (H, W) array. Raises
    EstimateOutOfImage when the estimated origin is outside the image.
    """
    pixels = getattr(img, "pixels", img)
    h, w = pixels.shape
    if not (0.0 <= est.u <= w - 1 and 0.0 <= est.v <= h - 1):
        raise EstimateOutOfImage(
            f"estimate ({est.u:.1f}, {est.v:.1f}) outside {w}x{h} image")
    frame = make_frame(est, spec)
    jj, ii = np.meshgrid(np.arange(spec.patch_height, dtype=np.float64),
                         np.arange(spec.patch_width, dtype=np.float64),
                         indexing="ij")
    centers = np.stack([ii.ravel() + 0.5, jj.ravel() + 0.5], axis=1)
    uv = frame.patch_px_to_image(centers)
    out = bilinear_sample(pixels, uv[:, 0], uv[:, 1]).reshape(
        spec.patch_height, spec.patch_width)
    if spec.normalize:
        out = out - out.mean()
        var = float(out.var())
        if var < _VARIANCE_FLOOR:
            out = np.zeros_like(out)  # constant patch: nothing to normalize
        else:
            out = out / math.sqrt(var)
    return Patch(out, frame)
