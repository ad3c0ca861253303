"""Pinhole camera model, weak-perspective conversion and (un)projection.

Pixel convention: integer pixel ``(col, row)`` is sampled at the continuous
image position ``(col + 0.5, row + 0.5)``. ``project`` returns continuous
coordinates in that frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .errors import BehindCameraError, InvalidCameraError, InvalidDepthError

log = logging.getLogger(__name__)

DEFAULT_FOCAL = 500.0


@dataclass(frozen=True)
class Intrinsics:
    focal_x: float
    focal_y: float
    principal_x: float
    principal_y: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.focal_x > 0 and self.focal_y > 0):
            raise InvalidCameraError(f"focal lengths must be positive, got {self.focal_x}, {self.focal_y}")
        if self.width <= 0 or self.height <= 0:
            raise InvalidCameraError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.principal_x <= self.width and 0 <= self.principal_y <= self.height):
            log.warning("principal point (%g, %g) lies outside the %dx%d image",
                        self.principal_x, self.principal_y, self.width, self.height)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.focal_x, 0.0, self.principal_x],
                         [0.0, self.focal_y, self.principal_y],
                         [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def scaled(self, factor: float, width: int | None = None, height: int | None = None) -> "Intrinsics":
        """Intrinsics for an image resampled by ``factor`` (0.5 halves the resolution)."""
        return replace(
            self,
            focal_x=self.focal_x * factor,
            focal_y=self.focal_y * factor,
            principal_x=self.principal_x * factor,
            principal_y=self.principal_y * factor,
            width=int(width if width is not None else round(self.width * factor)),
            height=int(height if height is not None else round(self.height * factor)),
        )

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame rays with unit z through every pixel center, shape (H, W, 3)."""
        cols = (np.arange(self.width) + 0.5 - self.principal_x) / self.focal_x
        rows = (np.arange(self.height) + 0.5 - self.principal_y) / self.focal_y
        rays = np.empty((self.height, self.width, 3))
        rays[..., 0] = cols[None, :]
        rays[..., 1] = rows[:, None]
        rays[..., 2] = 1.0
        return rays


@dataclass(frozen=True)
class WeakPerspectiveCam:
    """Scaled-orthographic camera as regressed by HMR-style pose networks."""

    scale: float
    tx: float
    ty: float
    focal: float = DEFAULT_FOCAL
    img_size: float = 512.0


def weak_to_perspective(cam: WeakPerspectiveCam) -> np.ndarray:
    """Root translation of a perspective camera equivalent to ``cam``."""
    if not cam.scale > 0:
        raise InvalidCameraError(f"weak-perspective scale must be positive, got {cam.scale}")
    if not cam.img_size > 0:
        raise InvalidCameraError(f"image size must be positive, got {cam.img_size}")
    return np.array([cam.tx, cam.ty, cam.focal / (0.5 * cam.img_size * cam.scale)])


def project(K: Intrinsics, points) -> np.ndarray:
    """Project camera-frame points (..., 3) to continuous pixel coordinates (..., 2)."""
    points = np.asarray(points, dtype=float)
    z = points[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("cannot project points with non-positive depth")
    u = K.focal_x * points[..., 0] / z + K.principal_x
    v = K.focal_y * points[..., 1] / z + K.principal_y
    return np.stack([u, v], axis=-1)


def unproject(K: Intrinsics, pixels, depth) -> np.ndarray:
    """Inverse of :func:`project` for continuous pixel coordinates at the given depth."""
    pixels = np.asarray(pixels, dtype=float)
    depth = np.asarray(depth, dtype=float)
    if np.any(~(depth > 0)):
        raise InvalidDepthError("depth must be positive")
    x = (pixels[..., 0] - K.principal_x) / K.focal_x * depth
    y = (pixels[..., 1] - K.principal_y) / K.focal_y * depth
    return np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)


def pixel_centers(K: Intrinsics) -> np.ndarray:
    """Continuous coordinates of all pixel centers, shape (H, W, 2)."""
    cols, rows = np.meshgrid(np.arange(K.width) + 0.5, np.arange(K.height) + 0.5)
    return np.stack([cols, rows], axis=-1)
