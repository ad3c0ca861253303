"""Independent slow reference implementations used as test oracles.

None of these import the code under test beyond plain data containers.
"""

from __future__ import annotations

from collections import deque

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial.transform import Rotation


def bfs_two_ring(faces, vertex: int) -> set:
    nbrs = {}
    for a, b, c in np.asarray(faces).tolist():
        for u, v in ((a, b), (b, c), (c, a)):
            nbrs.setdefault(u, set()).add(v)
            nbrs.setdefault(v, set()).add(u)
    seen = {vertex: 0}
    queue = deque([vertex])
    while queue:
        u = queue.popleft()
        if seen[u] == 2:
            continue
        for v in nbrs.get(u, ()):
            if v not in seen:
                seen[v] = seen[u] + 1
                queue.append(v)
    return set(seen)


def grid_mesh(n: int, spacing: float = 1.0):
    """``n`` x ``n`` vertex grid in the z=0 plane, two triangles per cell."""
    ys, xs = np.mgrid[:n, :n]
    verts = np.stack([xs.ravel() * spacing, ys.ravel() * spacing, np.zeros(n * n)], 1).astype(float)
    faces = []
    for r in range(n - 1):
        for c in range(n - 1):
            a, b, d, e = r * n + c, r * n + c + 1, (r + 1) * n + c, (r + 1) * n + c + 1
            faces += [(a, b, e), (a, e, d)]
    return verts, np.array(faces)


def ray_cast(origins, directions, vertices, faces, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Nearest ray parameter and hit face by testing triangles one by one (Moller-Trumbore).

    With rays from the origin, a chunk of rays only tests triangles in front of
    the camera whose projected bounding box overlaps the chunk's; this cull
    is conservative, so the result equals testing every triangle.
    """
    origins = np.asarray(origins, float)
    from_origin = origins.ndim == 1 and not origins.any()
    origins = np.broadcast_to(origins, np.shape(directions))
    directions = np.asarray(directions, float)
    tri = np.asarray(vertices, float)[np.asarray(faces)]
    if from_origin:
        front = np.all(tri[:, :, 2] > 0, axis=1)
        tri = tri[front]
        face_ids = np.flatnonzero(front)
        px = tri[:, :, 0] / tri[:, :, 2]
        py = tri[:, :, 1] / tri[:, :, 2]
        box = np.stack([px.min(1), px.max(1), py.min(1), py.max(1)], 1)
    else:
        face_ids = np.arange(len(tri))
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    n = len(directions)
    best_t = np.full(n, np.inf)
    best_f = np.full(n, -1)
    for s in range(0, n, chunk):
        d_all = directions[s:s + chunk]
        cand = np.arange(len(tri))
        if from_origin:
            with np.errstate(divide="ignore", invalid="ignore"):
                dx = d_all[:, 0] / d_all[:, 2]
                dy = d_all[:, 1] / d_all[:, 2]
            if np.all(d_all[:, 2] > 0):
                cand = np.flatnonzero((box[:, 1] >= dx.min()) & (box[:, 0] <= dx.max())
                                      & (box[:, 3] >= dy.min()) & (box[:, 2] <= dy.max()))
        if len(cand) == 0:
            continue
        o = origins[s:s + chunk, None, :]
        d = d_all[:, None, :]
        c0, c1, c2 = v0[cand], e1[cand], e2[cand]
        p = np.cross(d, c2[None])
        det = np.einsum("rfk,fk->rf", p, c1)
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tv = o - c0[None]
        u = np.einsum("rfk,rfk->rf", tv, p) * inv
        q = np.cross(tv, c1[None])
        v = np.einsum("rfk,rfk->rf", d, q) * inv
        t = np.einsum("fk,rfk->rf", c2, q) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-9)
        t = np.where(hit, t, np.inf)
        f = np.argmin(t, axis=1)
        tb = t[np.arange(len(f)), f]
        best_t[s:s + chunk] = tb
        best_f[s:s + chunk] = np.where(np.isfinite(tb), face_ids[cand[f]], -1)
    return best_t, best_f


def pixel_rays(K):
    cols = (np.arange(K.width) + 0.5 - K.principal_x) / K.focal_x
    rows = (np.arange(K.height) + 0.5 - K.principal_y) / K.focal_y
    d = np.stack(np.broadcast_arrays(cols[None, :], rows[:, None], np.ones((K.height, K.width))), -1)
    return d.reshape(-1, 3)


def ray_cast_depth(vertices, faces, K) -> np.ndarray:
    """Depth (z) of the nearest surface through each pixel center, NaN on misses."""
    t, _ = ray_cast(np.zeros(3), pixel_rays(K), vertices, faces)
    z = t.reshape(K.height, K.width)  # rays have unit z, so t is depth
    return np.where(np.isfinite(z), z, np.nan)


def naive_bilinear(image, x, y):
    h, w = image.shape[:2]
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    if x0 < 0 or y0 < 0 or x0 + 1 > w - 1 or y0 + 1 > h - 1:
        return None
    fx, fy = x - x0, y - y0
    return ((1 - fx) * (1 - fy) * image[y0, x0] + fx * (1 - fy) * image[y0, x0 + 1]
            + (1 - fx) * fy * image[y0 + 1, x0] + fx * fy * image[y0 + 1, x0 + 1])


def naive_ssim_cs(x, y, mask, window: int, c: float):
    """Double-loop windowed statistics over in-image, in-mask pixels (2-D inputs)."""
    h, w = x.shape
    r = window // 2
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            xs, ys = [], []
            for a in range(max(0, i - r), min(h, i + r + 1)):
                for b in range(max(0, j - r), min(w, j + r + 1)):
                    if mask[a, b]:
                        xs.append(x[a, b])
                        ys.append(y[a, b])
            if not xs:
                out[i, j] = 1.0
                continue
            xs, ys = np.array(xs), np.array(ys)
            mx, my = xs.mean(), ys.mean()
            vx = ((xs - mx) ** 2).mean()
            vy = ((ys - my) ** 2).mean()
            cxy = ((xs - mx) * (ys - my)).mean()
            out[i, j] = (2 * cxy + c) / (vx + vy + c)
    return out


def brute_nearest(result, truth, chunk: int = 512) -> np.ndarray:
    result = np.asarray(result, float)
    truth = np.asarray(truth, float)
    out = np.empty(len(result))
    for s in range(0, len(result), chunk):
        d = np.sqrt(((result[s:s + chunk, None, :] - truth[None]) ** 2).sum(-1))
        out[s:s + chunk] = d.min(axis=1)
    return out


def scalar_warp(fx, fy, cx, cy, rot, trans, col, row, depth):
    """Target pixel (col, row) at ``depth`` moved by (rot, trans), projected back to pixels."""
    x = (col + 0.5 - cx) / fx * depth
    y = (row + 0.5 - cy) / fy * depth
    p = [x, y, depth]
    q = [sum(rot[i][k] * p[k] for k in range(3)) + trans[i] for i in range(3)]
    return fx * q[0] / q[2] + cx, fy * q[1] / q[2] + cy


def random_rotation(rng, max_angle=None):
    if max_angle is None:
        return Rotation.random(random_state=rng).as_matrix()
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Rotation.from_rotvec(axis * rng.uniform(0, max_angle)).as_matrix()


def smooth_image(rng, shape, sigma=1.5):
    img = gaussian_filter(rng.random(shape), (sigma, sigma) + (0,) * (len(shape) - 2))
    return np.clip((img - 0.5) * 4 + 0.5, 0, 1)
