"""Synthetic deforming body proxies with exact ground truth.

The proxy is a torso capsule plus an arm capsule, dense enough to sit in the
same vertex-count regime as an SMPL mesh. A seed fixes the motion, texture and
detail, so every scene can be regenerated bit for bit. Ground-truth depth is
rendered from the displaced (detailed) mesh with the same rasterizer the
pipeline uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .camera import Intrinsics
from .errors import InputError
from .mesh import TriMesh, TriMeshSequence
from .raster import DepthMap, rasterize

MOTION_KINDS = ("rigid", "articulated", "bend")


@dataclass(frozen=True)
class Bump:
    """Gaussian displacement along the outward normal of the torso, in meters."""

    amplitude: float = 0.03
    sigma: float = 0.05
    height: float = 0.0
    azimuth: float = 0.0


@dataclass(frozen=True)
class Capsule:
    start: np.ndarray
    end: np.ndarray
    radius: float

    def normals(self, points) -> np.ndarray:
        axis = self.end - self.start
        s = np.clip((points - self.start) @ axis / (axis @ axis), 0.0, 1.0)
        radial = points - (self.start + s[..., None] * axis)
        return radial / np.linalg.norm(radial, axis=-1, keepdims=True)


def capsule_mesh(radius: float, length: float, n_around: int, n_body: int, n_cap: int):
    """Capsule along +y from y=0 to y=length (cylinder part), poles on the axis.

    Returns vertices, faces and the axial coordinate of each vertex.
    """
    rings = []
    # bottom-up: cap at y < 0, cylinder, cap at y > length
    for k in range(1, n_cap + 1):
        a = -np.pi / 2 + (np.pi / 2) * k / (n_cap + 1)
        rings.append((radius * np.cos(a), radius * np.sin(a)))
    for k in range(n_body + 1):
        rings.append((radius, length * k / n_body))
    for k in range(1, n_cap + 1):
        a = (np.pi / 2) * k / (n_cap + 1)
        rings.append((radius * np.cos(a), length + radius * np.sin(a)))
    phi = 2 * np.pi * np.arange(n_around) / n_around
    verts = [[0.0, -radius, 0.0]]
    for r, y in rings:
        # azimuth 0 faces -z (toward a camera looking down +z)
        verts.extend(np.stack([r * np.sin(phi), np.full(n_around, y), -r * np.cos(phi)], 1))
    verts.append([0.0, length + radius, 0.0])
    verts = np.asarray(verts, dtype=float)
    faces = []
    nr = len(rings)
    ring0 = 1
    top = len(verts) - 1
    j = np.arange(n_around)
    jn = (j + 1) % n_around
    faces.append(np.stack([np.zeros(n_around, int), ring0 + jn, ring0 + j], 1))
    for r in range(nr - 1):
        a = ring0 + r * n_around
        b = a + n_around
        faces.append(np.stack([a + j, a + jn, b + jn], 1))
        faces.append(np.stack([a + j, b + jn, b + j], 1))
    last = ring0 + (nr - 1) * n_around
    faces.append(np.stack([np.full(n_around, top), last + j, last + jn], 1))
    return verts, np.concatenate(faces).astype(np.int64), verts[:, 1].copy()


def _axis_rotation(axis_from, axis_to):
    """Rotation taking unit vector ``axis_from`` onto ``axis_to``."""
    a = np.asarray(axis_from, float) / np.linalg.norm(axis_from)
    b = np.asarray(axis_to, float) / np.linalg.norm(axis_to)
    v = np.cross(a, b)
    c = float(a @ b)
    if np.linalg.norm(v) < 1e-12:
        return np.eye(3) if c > 0 else Rotation.from_rotvec(np.pi * np.array([0, 0, 1.0])).as_matrix()
    return Rotation.from_rotvec(v / np.linalg.norm(v) * np.arctan2(np.linalg.norm(v), c)).as_matrix()


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


@dataclass
class BodyProxy:
    vertices: np.ndarray
    faces: np.ndarray
    component: np.ndarray      # per-vertex: 0 torso, 1 arm
    arm_coord: np.ndarray      # distance along the arm axis from the shoulder
    capsules: tuple
    center: np.ndarray
    shoulder: np.ndarray


def body_proxy(density: float = 1.0, center=(0.0, 0.0, 1.2)) -> BodyProxy:
    center = np.asarray(center, float)
    n_around = max(8, int(round(96 * density)))
    n_body = max(2, int(round(44 * density)))
    n_cap = max(2, int(round(12 * density)))
    t_r, t_len = 0.16, 0.44
    tv, tf, _ = capsule_mesh(t_r, t_len, n_around, n_body, n_cap)
    tv = tv + center - np.array([0.0, t_len / 2, 0.0])
    torso = Capsule(center - [0, t_len / 2, 0], center + [0, t_len / 2, 0], t_r)

    a_r, a_len = 0.05, 0.40
    shoulder = center + np.array([0.23, -0.17, 0.0])
    av, af, ay = capsule_mesh(a_r, a_len, max(8, int(round(32 * density))),
                              max(2, int(round(24 * density))), max(2, int(round(5 * density))))
    # arm hangs down (+y is down in camera coordinates), already along +y
    av = av + shoulder
    arm = Capsule(shoulder, shoulder + np.array([0, a_len, 0]), a_r)

    verts = np.concatenate([tv, av])
    faces = np.concatenate([tf, af + len(tv)])
    component = np.concatenate([np.zeros(len(tv), int), np.ones(len(av), int)])
    arm_coord = np.concatenate([np.zeros(len(tv)), np.maximum(ay, 0.0)])
    return BodyProxy(verts, faces, component, arm_coord, (torso, arm), center, shoulder)


@dataclass
class Texture:
    directions: np.ndarray   # (C, K, 3) spatial frequencies, rad/m
    phases: np.ndarray       # (C, K)
    amplitudes: np.ndarray   # (C, K)
    base: np.ndarray         # (C,)
    constant: float | None = None

    def albedo(self, points) -> np.ndarray:
        if self.constant is not None:
            return np.full(points.shape[:-1] + (3,), self.constant)
        arg = np.einsum("...d,ckd->...ck", points, self.directions) + self.phases
        val = self.base + np.sum(self.amplitudes * np.sin(arg), axis=-1)
        return np.clip(val, 0.0, 1.0)


def random_texture(rng, n_waves: int = 10) -> Texture:
    dirs = rng.normal(size=(3, n_waves, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    freq = np.exp(rng.uniform(np.log(50.0), np.log(220.0), size=(3, n_waves, 1)))
    amps = rng.uniform(0.5, 1.0, size=(3, n_waves))
    amps *= 0.38 / amps.sum(axis=1, keepdims=True)
    return Texture(dirs * freq, rng.uniform(0, 2 * np.pi, size=(3, n_waves)), amps,
                   rng.uniform(0.45, 0.55, size=3))


@dataclass
class Lighting:
    direction: np.ndarray = field(default_factory=lambda: np.array([-0.3, -0.5, -1.0]) / np.sqrt(1.34))
    ambient: float = 0.35
    diffuse: float = 0.65


@dataclass
class FramePose:
    """Generating motion of one frame, applied to rest-pose vertices."""

    rotation: np.ndarray
    translation: np.ndarray
    arm_rotation: np.ndarray
    bend_angle: float


@dataclass
class SynthScene:
    sequence: TriMeshSequence
    detailed: list
    rest: np.ndarray
    rest_detailed: np.ndarray
    proxy: BodyProxy
    poses: list
    kind: str
    texture: Texture
    lighting: Lighting
    K: Intrinsics
    seed: int
    bumps: tuple
    shading_drift: bool = False
    blend_band: float = 0.08
    bend_band: tuple = (-0.05, 0.10)

    @property
    def n_frames(self) -> int:
        return len(self.sequence)

    def base_mesh(self, f: int) -> TriMesh:
        return self.sequence.mesh(f)

    def detailed_mesh(self, f: int) -> TriMesh:
        return TriMesh(self.detailed[f], self.sequence.topology)

    def vertex_transforms(self, f: int):
        """Per-vertex generating rotation/translation rest -> frame ``f``.

        Exact everywhere for rigid scenes; for articulated and bend scenes it
        is exact only outside the blend bands.
        """
        return _vertex_rigid(self, self.poses[f], self.rest)


def _bend_weight(scene_or_band, y):
    lo, hi = scene_or_band
    return _smoothstep((y - lo) / (hi - lo))


def _pose_vertices(rest, proxy: BodyProxy, pose: FramePose, kind: str, blend_band: float, bend_band) -> np.ndarray:
    pts = rest
    if kind == "articulated":
        w = (proxy.component == 1) * _smoothstep(proxy.arm_coord / blend_band)
        moved = (rest - proxy.shoulder) @ pose.arm_rotation.T + proxy.shoulder
        pts = (1 - w)[:, None] * rest + w[:, None] * moved
    elif kind == "bend":
        y = rest[:, 1] - proxy.center[1]
        ang = pose.bend_angle * _bend_weight(bend_band, y)
        rot = Rotation.from_rotvec(ang[:, None] * np.array([1.0, 0.0, 0.0])).as_matrix()
        pts = np.einsum("vij,vj->vi", rot, rest - proxy.center) + proxy.center
    return (pts - proxy.center) @ pose.rotation.T + proxy.center + pose.translation


def _vertex_rigid(scene: SynthScene, pose: FramePose, rest):
    proxy = scene.proxy
    n = len(rest)
    local = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    pivot = np.broadcast_to(proxy.center, (n, 3)).copy()
    if scene.kind == "articulated":
        arm = (proxy.component == 1) & (proxy.arm_coord >= scene.blend_band)
        local[arm] = pose.arm_rotation
        pivot[arm] = proxy.shoulder
    elif scene.kind == "bend":
        y = rest[:, 1] - proxy.center[1]
        ang = pose.bend_angle * _bend_weight(scene.bend_band, y)
        local = Rotation.from_rotvec(ang[:, None] * np.array([1.0, 0.0, 0.0])).as_matrix()
    # x -> G(L(x - p) + p) with G(y) = Rg (y - c) + c + d
    rot = np.einsum("ij,vjk->vik", pose.rotation, local)
    lp = pivot - np.einsum("vij,vj->vi", local, pivot)
    trans = np.einsum("ij,vj->vi", pose.rotation, lp - proxy.center) + proxy.center + pose.translation
    return rot, trans


def _frame_poses(rng, frames: int, kind: str) -> list:
    rate = np.deg2rad(rng.uniform(2.0, 3.0)) * rng.choice([-1.0, 1.0])
    mid = (frames - 1) / 2
    ph = rng.uniform(0, 2 * np.pi, size=4)
    arm_phase = rng.uniform(0, 2 * np.pi)
    arm_rate = rng.uniform(0.25, 0.4)
    fwd_max = np.deg2rad(rng.uniform(40, 60))
    add_max = np.deg2rad(rng.uniform(60, 85))
    bend_max = np.deg2rad(rng.uniform(15, 30))
    poses = []
    for f in range(frames):
        yaw = rate * (f - mid)
        tilt = np.deg2rad(2.0) * np.sin(0.2 * f + ph[0])
        rot = Rotation.from_euler("yx", [yaw, tilt]).as_matrix()
        trans = np.array([0.03 * np.sin(0.25 * f + ph[1]), 0.015 * np.sin(0.2 * f + ph[2]),
                          0.02 * np.sin(0.15 * f + ph[3])])
        s = 0.5 - 0.5 * np.cos(arm_rate * f + arm_phase)
        arm_rot = np.eye(3)
        bend = 0.0
        if kind == "articulated":
            # swing forward (toward the camera, -z) and adduct toward the torso midline
            arm_rot = Rotation.from_euler("xz", [-fwd_max * s, add_max * s]).as_matrix()
        elif kind == "bend":
            bend = bend_max * np.sin(arm_rate * f + arm_phase)
        poses.append(FramePose(rot, trans, arm_rot, bend))
    return poses


def default_intrinsics(resolution: int = 256) -> Intrinsics:
    f = 300.0 * resolution / 256
    return Intrinsics(f, f, resolution / 2, resolution / 2, resolution, resolution)


def displace(proxy: BodyProxy, bumps) -> np.ndarray:
    """Rest vertices pushed along the torso normal by the summed bump field."""
    rest = proxy.vertices
    torso = proxy.capsules[0]
    normals = torso.normals(rest)
    height = np.zeros(len(rest))
    on_torso = proxy.component == 0
    for b in bumps:
        c = proxy.center + np.array([torso.radius * np.sin(b.azimuth), b.height, -torso.radius * np.cos(b.azimuth)])
        d2 = np.sum((rest - c) ** 2, axis=1)
        height += b.amplitude * np.exp(-0.5 * d2 / b.sigma ** 2)
    height *= on_torso
    return rest + height[:, None] * normals


def generate_scene(seed: int = 0, frames: int = 19, motion_kind: str = "rigid", bumps=(Bump(),),
                   K: Intrinsics | None = None, density: float = 1.0, shading_drift: bool = False,
                   constant_albedo: float | None = None, lighting: Lighting | None = None) -> SynthScene:
    if motion_kind not in MOTION_KINDS:
        raise InputError(f"unsupported motion kind {motion_kind!r}; expected one of {MOTION_KINDS}")
    if frames < 1:
        raise InputError("scene needs at least one frame")
    rng = np.random.default_rng(seed)
    proxy = body_proxy(density)
    poses = _frame_poses(rng, frames, motion_kind)
    texture = random_texture(rng)
    if constant_albedo is not None:
        texture.constant = float(constant_albedo)
    bumps = tuple(bumps or ())
    rest_detailed = displace(proxy, bumps)
    scene = SynthScene(
        sequence=None, detailed=[], rest=proxy.vertices, rest_detailed=rest_detailed, proxy=proxy,
        poses=poses, kind=motion_kind, texture=texture, lighting=lighting or Lighting(),
        K=K or default_intrinsics(), seed=seed, bumps=bumps, shading_drift=shading_drift)
    base_frames = [_pose_vertices(proxy.vertices, proxy, p, motion_kind, scene.blend_band, scene.bend_band)
                   for p in poses]
    scene.detailed = [_pose_vertices(rest_detailed, proxy, p, motion_kind, scene.blend_band, scene.bend_band)
                      for p in poses]
    scene.sequence = TriMeshSequence(base_frames, proxy.faces)
    return scene


def _vertex_normals(vertices, faces) -> np.ndarray:
    tri = vertices[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    vn = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(vn, faces[:, k], fn)
    return vn / np.maximum(np.linalg.norm(vn, axis=1, keepdims=True), 1e-300)


def render_appearance(scene: SynthScene, frame: int, background: float = 0.0):
    """Shaded textured image (H, W, 3) and ground-truth composed depth of one frame."""
    K = scene.K
    verts = scene.detailed[frame]
    faces = scene.sequence.topology
    frags = rasterize(verts, faces, K)
    m = frags.valid
    rest_pts = frags.interpolate(scene.rest, faces)[m]
    albedo = scene.texture.albedo(rest_pts)
    comp = scene.proxy.component[faces[frags.face[m], 0]]
    normals = np.empty_like(rest_pts)
    for c, cap in enumerate(scene.proxy.capsules):
        sel = comp == c
        normals[sel] = cap.normals(rest_pts[sel])
    if scene.shading_drift:
        n = frags.interpolate(_vertex_normals(verts, faces), faces)[m]
        normals = n / np.linalg.norm(n, axis=1, keepdims=True)
    light = scene.lighting
    cosine = np.maximum(0.0, normals @ light.direction)
    shade = light.ambient + light.diffuse * cosine
    image = np.full(K.shape + (3,), float(background))
    image[m] = np.clip(albedo * shade[:, None], 0.0, 1.0)
    return image, DepthMap(frags.depth, frags.valid)


def render_sequence(scene: SynthScene):
    images, depths = [], []
    for f in range(scene.n_frames):
        img, d = render_appearance(scene, f)
        images.append(img)
        depths.append(d)
    return images, depths
