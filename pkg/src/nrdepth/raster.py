"""Z-buffer rasterization of triangle meshes into depth, motion and visibility.

Coverage follows the pixel-center rule with top-left tie breaking, so two
triangles sharing an edge never both claim a pixel. Depth is interpolated
perspective-correctly (1/z is affine in screen space), which makes the
rendered depth of a planar triangle equal the exact ray-plane intersection.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .camera import Intrinsics, pixel_centers, unproject
from .errors import InputError
from .mesh import TriMesh, VertexTransforms, all_vertex_transforms, build_two_ring

log = logging.getLogger(__name__)

NEAR = 1e-6
TIE_EPS = 1e-9
VISIBILITY_TOLERANCE = 0.005
# candidate (triangle, pixel) pairs processed per batch
_CHUNK = 4_000_000


@dataclass
class DepthMap:
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape:
            raise InputError("depth values and validity mask differ in shape")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_array(cls, values) -> "DepthMap":
        values = np.asarray(values, dtype=float)
        valid = np.isfinite(values) & (values > 0)
        return cls(np.where(valid, values, np.nan), valid)


@dataclass
class MotionMap:
    """Per-pixel rigid transform target -> reference, ``X_r = R @ X_t + t``."""

    rotation: np.ndarray
    translation: np.ndarray
    valid: np.ndarray

    @property
    def shape(self):
        return self.valid.shape

    @classmethod
    def identity(cls, valid) -> "MotionMap":
        valid = np.asarray(valid, dtype=bool)
        h, w = valid.shape
        rot = np.broadcast_to(np.eye(3), (h, w, 3, 3)).copy()
        return cls(rot, np.zeros((h, w, 3)), valid.copy())

    @classmethod
    def uniform(cls, valid, rotation, translation) -> "MotionMap":
        valid = np.asarray(valid, dtype=bool)
        h, w = valid.shape
        rot = np.broadcast_to(np.asarray(rotation, float), (h, w, 3, 3)).copy()
        trans = np.broadcast_to(np.asarray(translation, float), (h, w, 3)).copy()
        return cls(rot, trans, valid.copy())


@dataclass
class Fragments:
    """Front-most triangle per pixel with perspective-correct barycentrics."""

    face: np.ndarray
    bary: np.ndarray
    depth: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.face >= 0

    def interpolate(self, vertex_attr, faces) -> np.ndarray:
        """Interpolate a per-vertex attribute (V, ...) to pixels; invalid pixels get 0."""
        vertex_attr = np.asarray(vertex_attr, dtype=float)
        out = np.zeros(self.face.shape + vertex_attr.shape[1:])
        m = self.valid
        tri = faces[self.face[m]]
        w = self.bary[m]
        expand = (slice(None),) + (None,) * (vertex_attr.ndim - 1)
        out[m] = sum(w[:, k][expand] * vertex_attr[tri[:, k]] for k in range(3))
        return out


def _top_left(dx, dy):
    return (dy < 0) | ((dy == 0) & (dx > 0))


def rasterize(vertices, faces, K: Intrinsics) -> Fragments:
    """Rasterize camera-frame triangles; triangles touching z <= 0 are skipped."""
    vertices = np.asarray(vertices, dtype=float)
    faces = np.asarray(faces, dtype=np.int64)
    h, w = K.height, K.width
    face_out = np.full((h, w), -1, dtype=np.int64)
    bary_out = np.zeros((h, w, 3))
    depth_out = np.full((h, w), np.inf)

    z = vertices[:, 2]
    front = np.all(z[faces] > NEAR, axis=1)
    if not np.any(front):
        if len(faces):
            log.warning("mesh lies entirely behind the camera; empty render")
        return Fragments(face_out, bary_out, np.full((h, w), np.nan))
    fid = np.flatnonzero(front)
    tri = faces[fid]
    zs = z[tri]
    u = K.focal_x * vertices[:, 0] / np.where(z > NEAR, z, 1.0) + K.principal_x
    v = K.focal_y * vertices[:, 1] / np.where(z > NEAR, z, 1.0) + K.principal_y
    xs, ys = u[tri], v[tri]

    area = (xs[:, 1] - xs[:, 0]) * (ys[:, 2] - ys[:, 0]) - (xs[:, 2] - xs[:, 0]) * (ys[:, 1] - ys[:, 0])
    keep = area != 0
    # bounding box of pixel indices whose centers may fall inside
    c0 = np.clip(np.ceil(xs.min(1) - 0.5), 0, w).astype(np.int64)
    c1 = np.clip(np.floor(xs.max(1) - 0.5), -1, w - 1).astype(np.int64)
    r0 = np.clip(np.ceil(ys.min(1) - 0.5), 0, h).astype(np.int64)
    r1 = np.clip(np.floor(ys.max(1) - 0.5), -1, h - 1).astype(np.int64)
    bw = np.maximum(c1 - c0 + 1, 0)
    bh = np.maximum(r1 - r0 + 1, 0)
    count = np.where(keep, bw * bh, 0)
    keep &= count > 0
    sel = np.flatnonzero(keep)
    if sel.size == 0:
        return Fragments(face_out, bary_out, np.full((h, w), np.nan))

    # orient every triangle so that its signed area is positive
    flip = area[sel] < 0
    order = np.where(flip[:, None], [0, 2, 1], [0, 1, 2])
    pick = np.arange(len(sel))[:, None]
    X = xs[sel][pick, order]
    Y = ys[sel][pick, order]
    Z = zs[sel][pick, order]
    A = np.abs(area[sel])
    ids = fid[sel]

    cand_face, cand_pix, cand_depth, cand_bary = [], [], [], []
    starts = np.concatenate([[0], np.cumsum(count[sel])])
    lo = 0
    while lo < len(sel):
        hi = int(np.searchsorted(starts, starts[lo] + _CHUNK, side="right")) - 1
        hi = max(hi, lo + 1)
        n = count[sel][lo:hi]
        t = np.repeat(np.arange(lo, hi), n)
        k = np.arange(int(n.sum())) - np.repeat(starts[lo:hi] - starts[lo], n)
        col = c0[sel][t] + k % bw[sel][t]
        row = r0[sel][t] + k // bw[sel][t]
        px = col + 0.5
        py = row + 0.5
        inside = np.ones(len(t), dtype=bool)
        lam = np.empty((len(t), 3))
        for e, (i, j) in enumerate(((1, 2), (2, 0), (0, 1))):
            ex = X[t, j] - X[t, i]
            ey = Y[t, j] - Y[t, i]
            ef = ex * (py - Y[t, i]) - ey * (px - X[t, i])
            inside &= (ef > 0) | ((ef == 0) & _top_left(ex, ey))
            lam[:, e] = ef
        t, col, row, lam = t[inside], col[inside], row[inside], lam[inside]
        lam /= A[t][:, None]
        inv = lam / Z[t]
        inv_z = inv.sum(1)
        depth = 1.0 / inv_z
        persp = inv * depth[:, None]
        # undo the orientation swap so weights follow the original vertex order
        swap = flip[t]
        persp[swap] = persp[swap][:, [0, 2, 1]]
        cand_face.append(ids[t])
        cand_pix.append(row * w + col)
        cand_depth.append(depth)
        cand_bary.append(persp)
        lo = hi

    face_c = np.concatenate(cand_face)
    pix_c = np.concatenate(cand_pix)
    depth_c = np.concatenate(cand_depth)
    bary_c = np.concatenate(cand_bary)

    zmin = np.full(h * w, np.inf)
    np.minimum.at(zmin, pix_c, depth_c)
    near_front = depth_c <= zmin[pix_c] + TIE_EPS
    best_face = np.full(h * w, np.iinfo(np.int64).max)
    np.minimum.at(best_face, pix_c[near_front], face_c[near_front])
    win = near_front & (face_c == best_face[pix_c])
    pix_w = pix_c[win]
    face_out.ravel()[pix_w] = face_c[win]
    depth_out.ravel()[pix_w] = depth_c[win]
    bary_out.reshape(-1, 3)[pix_w] = bary_c[win]
    depth_out[face_out < 0] = np.nan
    return Fragments(face_out, bary_out, depth_out)


def render_depth(mesh: TriMesh, K: Intrinsics) -> DepthMap:
    frags = rasterize(mesh.vertices, mesh.faces, K)
    return DepthMap(frags.depth, frags.valid)


# --------------------------------------------------------------------------- rotations

def mean_rotation(rotations) -> np.ndarray:
    """Average rotations along axis -3 via sign-aligned normalized quaternion mean.

    ``rotations`` has shape (..., k, 3, 3); the result has shape (..., 3, 3).
    """
    rotations = np.asarray(rotations, dtype=float)
    lead = rotations.shape[:-3]
    k = rotations.shape[-3]
    if rotations.size == 0:
        return np.zeros(lead + (3, 3))
    q = Rotation.from_matrix(rotations.reshape(-1, 3, 3)).as_quat().reshape(lead + (k, 4))
    sign = np.sign(np.sum(q * q[..., :1, :], axis=-1, keepdims=True))
    sign[sign == 0] = 1.0
    qm = np.sum(q * sign, axis=-2)
    qm /= np.linalg.norm(qm, axis=-1, keepdims=True)
    return Rotation.from_quat(qm.reshape(-1, 4)).as_matrix().reshape(lead + (3, 3))


def render_motion_map(target: TriMesh, reference: TriMesh | None, K: Intrinsics,
                      transforms: VertexTransforms | None = None,
                      fragments: Fragments | None = None) -> MotionMap:
    """Rasterize per-vertex transforms; each pixel gets the mean over its triangle's corners."""
    if transforms is None:
        if reference is None:
            raise InputError("need either a reference mesh or precomputed transforms")
        transforms = all_vertex_transforms(target, reference,
                                           build_two_ring(target.faces, target.vertex_count))
    if fragments is None:
        fragments = rasterize(target.vertices, target.faces, K)
    h, w = K.height, K.width
    rot = np.broadcast_to(np.eye(3), (h, w, 3, 3)).copy()
    trans = np.zeros((h, w, 3))
    valid = fragments.valid.copy()
    corners = target.faces[fragments.face[valid]]
    valid[valid] = ~np.any(transforms.degenerate[corners], axis=1)
    corners = target.faces[fragments.face[valid]]
    if len(corners):
        rot[valid] = mean_rotation(transforms.rotations[corners])
        trans[valid] = transforms.translations[corners].mean(axis=1)
    return MotionMap(rot, trans, valid)


# --------------------------------------------------------------------------- visibility

def visible_in(depth: DepthMap, K: Intrinsics, points, tolerance: float = VISIBILITY_TOLERANCE) -> np.ndarray:
    """Whether camera-frame ``points`` (..., 3) are unoccluded in a rendered depth map."""
    points = np.asarray(points, dtype=float)
    z = points[..., 2]
    out = np.zeros(z.shape, dtype=bool)
    ok = np.isfinite(z) & (z > NEAR)
    zs = np.where(ok, z, 1.0)
    u = K.focal_x * points[..., 0] / zs + K.principal_x
    v = K.focal_y * points[..., 1] / zs + K.principal_y
    ok &= (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    u = np.where(ok, u, 0.0)
    v = np.where(ok, v, 0.0)
    col = np.clip(np.floor(u), 0, K.width - 1).astype(np.int64)
    row = np.clip(np.floor(v), 0, K.height - 1).astype(np.int64)
    d = depth.values[row, col]
    ok &= depth.valid[row, col]
    out[ok] = z[ok] <= d[ok] + tolerance
    return out


class _ScreenBins:
    """Projected triangles binned by the pixel cells their bounding boxes touch."""

    def __init__(self, vertices, faces, K: Intrinsics):
        vertices = np.asarray(vertices, dtype=float)
        faces = np.asarray(faces, dtype=np.int64)
        z = vertices[:, 2]
        ok = np.all(z[faces] > NEAR, axis=1)
        zs_safe = np.where(z > NEAR, z, 1.0)
        u = K.focal_x * vertices[:, 0] / zs_safe + K.principal_x
        v = K.focal_y * vertices[:, 1] / zs_safe + K.principal_y
        tri = faces[ok]
        X, Y, Z = u[tri], v[tri], z[tri]
        area = (X[:, 1] - X[:, 0]) * (Y[:, 2] - Y[:, 0]) - (X[:, 2] - X[:, 0]) * (Y[:, 1] - Y[:, 0])
        nz = area != 0
        X, Y, Z, area = X[nz], Y[nz], Z[nz], area[nz]
        flip = area < 0
        X[flip] = X[flip][:, [0, 2, 1]]
        Y[flip] = Y[flip][:, [0, 2, 1]]
        Z[flip] = Z[flip][:, [0, 2, 1]]
        self.X, self.Y, self.Z, self.A = X, Y, Z, np.abs(area)
        w, h = K.width, K.height
        c0 = np.clip(np.floor(X.min(1)), 0, w).astype(np.int64)
        c1 = np.clip(np.floor(X.max(1)), -1, w - 1).astype(np.int64)
        r0 = np.clip(np.floor(Y.min(1)), 0, h).astype(np.int64)
        r1 = np.clip(np.floor(Y.max(1)), -1, h - 1).astype(np.int64)
        bw = np.maximum(c1 - c0 + 1, 0)
        bh = np.maximum(r1 - r0 + 1, 0)
        n = bw * bh
        t = np.repeat(np.arange(len(X)), n)
        k = np.arange(int(n.sum())) - np.repeat(np.cumsum(n) - n, n)
        cell = (r0[t] + k // bw[t]) * w + c0[t] + k % bw[t]
        order = np.argsort(cell, kind="stable")
        self.tri = t[order]
        self.start = np.searchsorted(cell[order], np.arange(h * w + 1))
        self.K = K

    def depth_at(self, u, v) -> np.ndarray:
        """Nearest surface depth through image positions (u, v); inf where nothing is hit."""
        K = self.K
        out = np.full(u.shape, np.inf)
        inside_img = (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
        q = np.flatnonzero(inside_img)
        cell = np.floor(v[q]).astype(np.int64) * K.width + np.floor(u[q]).astype(np.int64)
        n = self.start[cell + 1] - self.start[cell]
        qi = np.repeat(np.arange(len(q)), n)
        ti = self.tri[np.repeat(self.start[cell], n) + np.arange(int(n.sum())) - np.repeat(np.cumsum(n) - n, n)]
        px, py = u[q][qi], v[q][qi]
        X, Y = self.X[ti], self.Y[ti]
        lam = np.empty((len(ti), 3))
        hit = np.ones(len(ti), dtype=bool)
        for e, (i, j) in enumerate(((1, 2), (2, 0), (0, 1))):
            ef = (X[:, j] - X[:, i]) * (py - Y[:, i]) - (Y[:, j] - Y[:, i]) * (px - X[:, i])
            hit &= ef >= 0
            lam[:, e] = ef
        lam = lam[hit] / self.A[ti[hit]][:, None]
        depth = 1.0 / np.sum(lam / self.Z[ti[hit]], axis=1)
        best = np.full(len(q), np.inf)
        np.minimum.at(best, qi[hit], depth)
        out[q] = best
        return out


@dataclass
class RenderedView:
    """A rasterized mesh that can also be depth-tested at arbitrary sub-pixel positions.

    :meth:`surface_depth` runs the same z-buffer test as the rasterizer at the
    exact projected position of each query point instead of the pixel center,
    so grazing surfaces and occlusion edges are resolved below pixel size.
    """

    vertices: np.ndarray
    faces: np.ndarray
    K: Intrinsics
    fragments: Fragments
    _bins: _ScreenBins | None = field(default=None, repr=False, compare=False)

    @classmethod
    def render(cls, mesh: TriMesh, K: Intrinsics) -> "RenderedView":
        return cls(mesh.vertices, mesh.faces, K, rasterize(mesh.vertices, mesh.faces, K))

    @property
    def depth(self) -> DepthMap:
        return DepthMap(self.fragments.depth, self.fragments.valid)

    def surface_depth(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Depth of the nearest surface along each point's viewing ray, and a hit flag."""
        if self._bins is None:
            self._bins = _ScreenBins(self.vertices, self.faces, self.K)
        K = self.K
        points = np.asarray(points, dtype=float)
        z = points[..., 2]
        ok = np.isfinite(z) & (z > NEAR)
        zs = np.where(ok, z, 1.0)
        u = np.where(ok, K.focal_x * points[..., 0] / zs + K.principal_x, -1.0)
        v = np.where(ok, K.focal_y * points[..., 1] / zs + K.principal_y, -1.0)
        u = np.where(np.isfinite(u), u, -1.0)
        v = np.where(np.isfinite(v), v, -1.0)
        d = self._bins.depth_at(u.ravel(), v.ravel()).reshape(z.shape)
        ok &= np.isfinite(d)
        return np.where(ok, d, np.nan), ok

    def visible(self, points, tolerance: float = VISIBILITY_TOLERANCE) -> np.ndarray:
        d, ok = self.surface_depth(points)
        z = np.asarray(points, dtype=float)[..., 2]
        out = np.zeros(z.shape, dtype=bool)
        out[ok] = z[ok] <= d[ok] + tolerance
        return out


def visibility(mesh_in_view: TriMesh, K: Intrinsics, query_points,
               tolerance: float = VISIBILITY_TOLERANCE) -> np.ndarray:
    """Per-point visibility of camera-frame points against the rendered mesh."""
    return RenderedView.render(mesh_in_view, K).visible(query_points, tolerance)


def depth_points(depth: DepthMap, K: Intrinsics) -> np.ndarray:
    """Camera-frame surface point per pixel (H, W, 3); invalid pixels hold NaN."""
    d = np.where(depth.valid, depth.values, 1.0)
    pts = unproject(K, pixel_centers(K), d)
    pts[~depth.valid] = np.nan
    return pts


# --------------------------------------------------------------------------- motion-map files

NRMM_MAGIC = b"NRMM"
NRMM_VERSION = 1


def write_motion_map(path, motion: MotionMap) -> None:
    """Binary motion map: header, H*W records of 12 float32, then a validity bitmask."""
    h, w = motion.shape
    rec = np.concatenate([motion.rotation.reshape(h, w, 9), motion.translation], axis=-1)
    with open(path, "wb") as fh:
        fh.write(NRMM_MAGIC)
        fh.write(struct.pack("<III", NRMM_VERSION, w, h))
        fh.write(rec.astype("<f4").tobytes())
        fh.write(np.packbits(motion.valid.ravel(), bitorder="big").tobytes())


def read_motion_map(path) -> MotionMap:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != NRMM_MAGIC:
        raise InputError(f"{path}: not a motion map (bad magic)")
    version, w, h = struct.unpack("<III", data[4:16])
    if version != NRMM_VERSION:
        raise InputError(f"{path}: unsupported motion map version {version}")
    n = h * w
    body = 16 + n * 48
    nmask = (n + 7) // 8
    if len(data) != body + nmask:
        raise InputError(f"{path}: truncated or oversized motion map")
    rec = np.frombuffer(data, dtype="<f4", count=n * 12, offset=16).astype(float).reshape(h, w, 12)
    valid = np.unpackbits(np.frombuffer(data, dtype=np.uint8, offset=body), count=n,
                          bitorder="big").astype(bool).reshape(h, w)
    return MotionMap(rec[..., :9].reshape(h, w, 3, 3).copy(), rec[..., 9:].copy(), valid)
