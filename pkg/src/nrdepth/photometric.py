"""Non-rigid inverse warping and the photo-consistency objective.

The target image is compared with every reference image resampled through
the composed depth and the per-pixel motion map. Each reference contributes
a masked mean of ``alpha * (1 - SSIM_cs) / 2 + (1 - alpha) * L1``; smoothness
and regularization act on the detail offset over the target silhouette.

A pixel is active for a reference when its mask is set and its bilinear
footprint lies inside the reference image, and inside the reference
silhouette when the tuple carries one; footprints straddling the silhouette
would blend background into the sample.

SSIM_cs statistics are taken over the active pixels inside each window only,
so pixels outside a reference's active set never influence its term. The
gradient with respect to the per-pixel detail offset is exact: every sampled
value depends only on its own pixel's depth, and the adjoint of the windowed
statistics is again a window sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .camera import Intrinsics
from .raster import NEAR, DepthMap, MotionMap

ALPHA = 0.9
GAMMA_SMOOTH = 1e-5
GAMMA_REG = 1e-6
SSIM_WINDOW = 7
SSIM_C = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    alpha: float = ALPHA
    gamma_smooth: float = GAMMA_SMOOTH
    gamma_reg: float = GAMMA_REG
    window: int = SSIM_WINDOW
    c: float = SSIM_C


@dataclass
class LossBreakdown:
    photo: float
    smooth: float
    regularizer: float
    total: float
    per_reference: list = field(default_factory=list)

    def log_line(self, iteration: int) -> str:
        vals = (self.photo, self.smooth, self.regularizer, self.total)
        return f"{iteration}, " + ", ".join(repr(float(v)) for v in vals)


def combine(photo: float, smooth: float, reg: float, weights: LossWeights) -> float:
    return photo + weights.gamma_smooth * smooth + weights.gamma_reg * reg


# --------------------------------------------------------------------------- warping

@dataclass
class Warp:
    coords: np.ndarray      # (H, W, 2) continuous reference-image coordinates
    valid: np.ndarray       # (H, W)
    jacobian: np.ndarray | None = None  # (H, W, 2) d(coords)/d(depth)


def warp_pixels(K: Intrinsics, motion: MotionMap, depth: DepthMap, with_jacobian: bool = False) -> Warp:
    """Reference-view coordinates of every target pixel under the composed depth."""
    return _warp(K, K.pixel_rays(), motion.rotation, motion.translation, motion.valid,
                 depth.values, depth.valid, with_jacobian)


def _warp(K, rays, rotation, translation, motion_valid, depth_values, depth_valid, with_jacobian):
    d = np.where(depth_valid, depth_values, 0.0)
    g = np.einsum("hwij,hwj->hwi", rotation, rays)
    q = d[..., None] * g + translation
    qz = q[..., 2]
    valid = depth_valid & motion_valid & (qz > NEAR)
    qz_safe = np.where(valid, qz, 1.0)
    u = K.focal_x * q[..., 0] / qz_safe + K.principal_x
    v = K.focal_y * q[..., 1] / qz_safe + K.principal_y
    coords = np.stack([u, v], axis=-1)
    jac = None
    if with_jacobian:
        inv2 = 1.0 / (qz_safe * qz_safe)
        du = K.focal_x * (g[..., 0] * qz - q[..., 0] * g[..., 2]) * inv2
        dv = K.focal_y * (g[..., 1] * qz - q[..., 1] * g[..., 2]) * inv2
        jac = np.stack([du, dv], axis=-1)
        jac[~valid] = 0.0
    coords[~valid] = np.nan
    return Warp(coords, valid, jac)


@dataclass
class Sample:
    values: np.ndarray
    valid: np.ndarray
    grad_x: np.ndarray | None = None
    grad_y: np.ndarray | None = None


def sample_bilinear(image, coords, with_gradient: bool = False) -> Sample:
    """Bilinear lookup at index-space ``coords`` (..., 2) where texel centers sit on integers.

    A sample is valid only when its whole 2x2 neighborhood lies inside the image.
    """
    image = np.asarray(image, dtype=float)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[..., None]
    h, w = image.shape[:2]
    x = np.asarray(coords[..., 0], dtype=float)
    y = np.asarray(coords[..., 1], dtype=float)
    finite = np.isfinite(x) & np.isfinite(y)
    xs = np.where(finite, x, -1.0)
    ys = np.where(finite, y, -1.0)
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    valid = finite & (x0 >= 0) & (x0 + 1 <= w - 1) & (y0 >= 0) & (y0 + 1 <= h - 1)
    xi = np.clip(x0, 0, w - 2).astype(np.int64)
    yi = np.clip(y0, 0, h - 2).astype(np.int64)
    fx = np.where(valid, xs - x0, 0.0)[..., None]
    fy = np.where(valid, ys - y0, 0.0)[..., None]
    i00 = image[yi, xi]
    i01 = image[yi, xi + 1]
    i10 = image[yi + 1, xi]
    i11 = image[yi + 1, xi + 1]
    top = i00 + fx * (i01 - i00)
    bottom = i10 + fx * (i11 - i10)
    values = top + fy * (bottom - top)
    values[~valid] = 0.0
    gx = gy = None
    if with_gradient:
        gx = (1 - fy) * (i01 - i00) + fy * (i11 - i10)
        gy = bottom - top
        gx[~valid] = 0.0
        gy[~valid] = 0.0
    if squeeze:
        values = values[..., 0]
        if with_gradient:
            gx, gy = gx[..., 0], gy[..., 0]
    return Sample(values, valid, gx, gy)


def footprint_inside(silhouette, coords) -> np.ndarray:
    """Whether all four texels a bilinear lookup at ``coords`` reads lie on ``silhouette``."""
    silhouette = np.asarray(silhouette, dtype=bool)
    h, w = silhouette.shape
    x = np.asarray(coords[..., 0], dtype=float)
    y = np.asarray(coords[..., 1], dtype=float)
    ok = np.isfinite(x) & np.isfinite(y)
    x0 = np.floor(np.where(ok, x, -1.0))
    y0 = np.floor(np.where(ok, y, -1.0))
    ok &= (x0 >= 0) & (x0 + 1 <= w - 1) & (y0 >= 0) & (y0 + 1 <= h - 1)
    xi = np.clip(x0, 0, w - 2).astype(np.int64)
    yi = np.clip(y0, 0, h - 2).astype(np.int64)
    both = silhouette[:, :-1] & silhouette[:, 1:]
    quad = both[:-1] & both[1:]
    return ok & quad[yi, xi]


# --------------------------------------------------------------------------- SSIM_cs

def box_sum(a, window: int) -> np.ndarray:
    """Sum over a ``window`` x ``window`` neighborhood, zero outside the image."""
    k = np.ones(window)
    return correlate1d(correlate1d(a, k, axis=0, mode="constant"), k, axis=1, mode="constant")


@dataclass
class _Stats:
    """Window statistics of the shifted inputs ``x``, ``y`` (shift-invariant quantities only)."""

    x: np.ndarray
    y: np.ndarray
    n: np.ndarray
    mu_x: np.ndarray
    mu_y: np.ndarray
    den: np.ndarray
    ssim: np.ndarray


def _anchor(a, mask):
    """One in-mask value per channel; subtracting it keeps constant regions exactly zero."""
    if not mask.any():
        return np.zeros(a.shape[-1])
    r, c = np.argwhere(mask)[0]
    return a[r, c]


def _masked_stats(x, y, mask, window, c) -> _Stats:
    squeeze = x.ndim == 2
    if squeeze:
        x, y = x[..., None], y[..., None]
    # SSIM_cs ignores additive constants; shifting avoids cancellation in E[x^2] - E[x]^2
    x = x - _anchor(x, mask)
    y = y - _anchor(y, mask)
    ch = x.shape[-1]
    m = mask.astype(float)[..., None]
    xm, ym = x * m, y * m
    sums = box_sum(np.concatenate([m, xm, ym, xm * x, ym * y, xm * y], axis=-1), window)
    n = sums[..., :1]
    n = np.where(n > 0, n, 1.0)
    sx, sy, sxx, syy, sxy = (sums[..., 1 + k * ch:1 + (k + 1) * ch] / n for k in range(5))
    var_x = sxx - sx * sx
    var_y = syy - sy * sy
    cov = sxy - sx * sy
    den = var_x + var_y + c
    ssim = (2 * cov + c) / den
    if squeeze:
        return _Stats(x[..., 0], y[..., 0], n[..., 0], sx[..., 0], sy[..., 0], den[..., 0], ssim[..., 0])
    return _Stats(x, y, n, sx, sy, den, ssim)


def ssim_cs(x, y, mask=None, window: int = SSIM_WINDOW, c: float = SSIM_C) -> np.ndarray:
    """Contrast-structure similarity ``(2 cov + c) / (var_x + var_y + c)`` per pixel.

    Window statistics use only pixels inside the image and inside ``mask``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if mask is None:
        mask = np.ones(x.shape[:2], dtype=bool)
    return _masked_stats(x, y, np.asarray(mask, dtype=bool), window, c).ssim


def _as_channels(a):
    a = np.asarray(a, dtype=float)
    return a if a.ndim == 3 else a[..., None]


def photo_loss_one_ref(target_image, warped, mask, alpha: float = ALPHA,
                       window: int = SSIM_WINDOW, c: float = SSIM_C) -> float:
    """Masked mean of the SSIM_cs / L1 blend between target and warped image."""
    x, y = _as_channels(target_image), _as_channels(warped)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        return 0.0
    s = _masked_stats(x, y, mask, window, c).ssim.mean(axis=-1)
    l1 = np.abs(x - y).mean(axis=-1)
    per_pixel = alpha * (1.0 - s) / 2.0 + (1.0 - alpha) * l1
    return float(per_pixel[mask].sum() / count)


def _photo_term(x, ref_image, warp: Warp, mask, weights: LossWeights, want_grad: bool, ref_silhouette=None):
    """One reference's loss and, optionally, its gradient w.r.t. per-pixel depth."""
    coords = warp.coords - 0.5
    smp = sample_bilinear(ref_image, coords, with_gradient=want_grad)
    y = _as_channels(smp.values)
    active = np.asarray(mask, dtype=bool) & warp.valid & smp.valid
    if ref_silhouette is not None:
        active &= footprint_inside(ref_silhouette, coords)
    count = int(active.sum())
    if count == 0:
        return 0.0, (np.zeros(mask.shape) if want_grad else None)
    alpha = weights.alpha
    st = _masked_stats(x, y, active, weights.window, weights.c)
    ch = x.shape[-1]
    diff = y - x
    per_pixel = alpha * (1.0 - st.ssim.mean(axis=-1)) / 2.0 + (1.0 - alpha) * np.abs(diff).mean(axis=-1)
    loss = float(per_pixel[active].sum() / count)
    if not want_grad:
        return loss, None

    am = active[..., None].astype(float)
    a = am * 2.0 / (st.n * st.den)
    s = st.ssim
    p1, p2, p3, p4 = np.split(
        box_sum(np.concatenate([a, a * st.mu_x, a * s, a * s * st.mu_y], axis=-1), weights.window), 4, axis=-1)
    dssim = st.x * p1 - p2 - st.y * p3 + p4
    dy = (-alpha / (2.0 * count * ch)) * dssim + ((1.0 - alpha) / (count * ch)) * np.sign(diff)
    dy *= am
    gx = _as_channels(smp.grad_x)
    gy = _as_channels(smp.grad_y)
    dcoord_x = (dy * gx).sum(axis=-1)
    dcoord_y = (dy * gy).sum(axis=-1)
    grad = dcoord_x * warp.jacobian[..., 0] + dcoord_y * warp.jacobian[..., 1]
    grad[~active] = 0.0
    return loss, grad


# --------------------------------------------------------------------------- regularizers

def _offset_pairs(offset, support):
    dx = offset[:, 1:] - offset[:, :-1]
    dy = offset[1:, :] - offset[:-1, :]
    mx = support[:, 1:] & support[:, :-1]
    my = support[1:, :] & support[:-1, :]
    return dx, dy, mx, my


def _smooth_from_offset(offset, support) -> float:
    dx, dy, mx, my = _offset_pairs(offset, support)
    return float(np.abs(dx[mx]).sum() + np.abs(dy[my]).sum())


def _smooth_grad(offset, support) -> np.ndarray:
    dx, dy, mx, my = _offset_pairs(offset, support)
    sx = np.sign(dx) * mx
    sy = np.sign(dy) * my
    g = np.zeros(offset.shape)
    g[:, 1:] += sx
    g[:, :-1] -= sx
    g[1:, :] += sy
    g[:-1, :] -= sy
    return g


def smooth_loss(composed: DepthMap, base: DepthMap) -> float:
    """Sum of |grad(composed) - grad(base)| over forward-difference pairs inside both maps."""
    support = composed.valid & base.valid
    offset = np.where(support, composed.values - base.values, 0.0)
    return _smooth_from_offset(offset, support)


def regularizer_loss(composed: DepthMap, base: DepthMap) -> float:
    support = composed.valid & base.valid
    return float(np.abs(composed.values[support] - base.values[support]).sum())


# --------------------------------------------------------------------------- full objective

def composed_depth(base: DepthMap, offset) -> DepthMap:
    offset = np.asarray(offset, dtype=float)
    return DepthMap(np.where(base.valid, base.values + offset, np.nan), base.valid.copy())


def inverse_warp(tup, offset, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Reference image ``index`` resampled into the target view, with its validity."""
    depth = composed_depth(tup.base, offset)
    warp = warp_pixels(tup.K, tup.motions[index], depth)
    coords = warp.coords - 0.5
    smp = sample_bilinear(tup.ref_images[index], coords)
    valid = smp.valid & warp.valid
    if tup.ref_silhouettes is not None:
        valid &= footprint_inside(tup.ref_silhouettes[index], coords)
    return smp.values, valid


def _support_box(support):
    rows = np.flatnonzero(support.any(axis=1))
    cols = np.flatnonzero(support.any(axis=0))
    if len(rows) == 0:
        return slice(0, 0), slice(0, 0)
    return slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)


def _evaluate(tup, offset, weights: LossWeights, want_grad: bool):
    offset = np.asarray(offset, dtype=float)
    support = tup.base.valid
    off = np.where(support, offset, 0.0)
    # every active pixel lies on the silhouette, so the photo terms are exact on its bounding box
    box = _support_box(support)
    depth_valid = support[box]
    depth_values = np.where(depth_valid, tup.base.values[box] + off[box], 0.0)
    rays = tup.K.pixel_rays()[box]
    x = _as_channels(tup.image)[box]
    per_ref = []
    grad = np.zeros(off.shape) if want_grad else None
    sils = tup.ref_silhouettes or [None] * len(tup.ref_images)
    for ref_image, motion, mask, sil in zip(tup.ref_images, tup.motions, tup.masks, sils):
        warp = _warp(tup.K, rays, motion.rotation[box], motion.translation[box], motion.valid[box],
                     depth_values, depth_valid, want_grad)
        loss, g = _photo_term(x, ref_image, warp, mask[box], weights, want_grad, sil)
        per_ref.append(loss)
        if want_grad:
            grad[box] += g
    photo = float(sum(per_ref))
    smooth = _smooth_from_offset(off, support)
    reg = float(np.abs(off[support]).sum())
    breakdown = LossBreakdown(photo, smooth, reg, combine(photo, smooth, reg, weights), per_ref)
    if want_grad:
        grad += weights.gamma_smooth * _smooth_grad(off, support)
        grad += weights.gamma_reg * np.sign(off) * support
        grad[~support] = 0.0
    return breakdown, grad


def photo_loss(tup, offset, weights: LossWeights = LossWeights()) -> float:
    return _evaluate(tup, offset, weights, False)[0].photo


def total_loss(tup, offset, weights: LossWeights = LossWeights()) -> LossBreakdown:
    return _evaluate(tup, offset, weights, False)[0]


def total_loss_gradient(tup, offset, weights: LossWeights = LossWeights()) -> np.ndarray:
    """Gradient of the total loss with respect to the per-pixel detail offset (meters)."""
    return _evaluate(tup, offset, weights, True)[1]


def loss_and_gradient(tup, offset, weights: LossWeights = LossWeights()):
    return _evaluate(tup, offset, weights, True)
