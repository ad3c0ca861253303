"""Triangle meshes of fixed topology and per-vertex rigid registration.

Two posed meshes that share a face list have explicit vertex correspondence.
The local motion of every vertex is the rigid transform that best maps its
two-ring neighborhood in the target mesh onto the same neighborhood in the
reference mesh (Kabsch on offsets from the center vertex).
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateNeighborhoodError, InputError, TopologyError

log = logging.getLogger(__name__)

SMPL_VERTEX_COUNT = 6890
# singular-value ratio below which a neighborhood is treated as collinear
DEGENERATE_RATIO = 1e-9


def validate_faces(faces, vertex_count: int) -> np.ndarray:
    faces = np.asarray(faces)
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise TopologyError(f"faces must have shape (F, 3), got {faces.shape}")
    if not np.issubdtype(faces.dtype, np.integer):
        if not np.all(np.mod(faces, 1) == 0):
            raise TopologyError("face indices must be integers")
    faces = faces.astype(np.int64)
    if faces.size and (faces.min() < 0 or faces.max() >= vertex_count):
        raise TopologyError(f"face index out of range for {vertex_count} vertices")
    degenerate = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
    if np.any(degenerate):
        raise TopologyError(f"degenerate face at index {int(np.flatnonzero(degenerate)[0])}")
    return faces


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 3:
            raise InputError(f"vertices must have shape (V, 3), got {v.shape}")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", validate_faces(self.faces, len(v)))

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    def transformed(self, rotation, translation) -> "TriMesh":
        return TriMesh(self.vertices @ np.asarray(rotation).T + translation, self.faces)


@dataclass
class TriMeshSequence:
    frames: list
    topology: np.ndarray
    frame_rate: float = 30.0

    def __post_init__(self):
        self.frames = [np.asarray(f, dtype=float) for f in self.frames]
        if not self.frames:
            raise InputError("empty mesh sequence")
        n = len(self.frames[0])
        for i, f in enumerate(self.frames):
            if f.shape != (n, 3):
                raise InputError(f"frame {i} has shape {f.shape}, expected ({n}, 3)")
        self.topology = validate_faces(self.topology, n)

    def __len__(self):
        return len(self.frames)

    def mesh(self, index: int) -> TriMesh:
        return TriMesh(self.frames[index], self.topology)


class RigidTransform(NamedTuple):
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


class VertexTransforms(NamedTuple):
    """Per-vertex transforms; ``degenerate`` marks vertices that fell back to identity."""

    rotations: np.ndarray
    translations: np.ndarray
    degenerate: np.ndarray

    def __len__(self):
        return len(self.rotations)

    def __getitem__(self, i):
        return RigidTransform(self.rotations[i], self.translations[i])


# --------------------------------------------------------------------------- adjacency

def edge_graph(faces, vertex_count: int) -> sp.csr_matrix:
    faces = validate_faces(faces, vertex_count)
    i = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2]])
    j = np.concatenate([faces[:, 1], faces[:, 2], faces[:, 0]])
    rows = np.concatenate([i, j])
    cols = np.concatenate([j, i])
    adj = sp.coo_matrix((np.ones(len(rows), dtype=np.int32), (rows, cols)),
                        shape=(vertex_count, vertex_count)).tocsr()
    adj.data[:] = 1
    return adj


def build_two_ring(faces, vertex_count: int) -> list[np.ndarray]:
    """Sorted two-ring neighbor indices (center included) for every vertex."""
    adj = edge_graph(faces, vertex_count)
    reach = adj + sp.identity(vertex_count, dtype=np.int32, format="csr")
    reach = (reach @ reach).tocsr()
    reach.sort_indices()
    return [reach.indices[reach.indptr[v]:reach.indptr[v + 1]].astype(np.int64)
            for v in range(vertex_count)]


def pad_neighborhoods(adjacency: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack ragged neighbor lists into an index array plus a validity mask."""
    width = max(len(n) for n in adjacency)
    index = np.zeros((len(adjacency), width), dtype=np.int64)
    mask = np.zeros((len(adjacency), width), dtype=bool)
    for v, nbrs in enumerate(adjacency):
        index[v, :len(nbrs)] = nbrs
        mask[v, :len(nbrs)] = True
    return index, mask


# --------------------------------------------------------------------------- registration

def kabsch_rotation(source_offsets, target_offsets, mask=None):
    """Best rotation mapping centered point sets, batched over leading axes.

    ``source_offsets`` and ``target_offsets`` have shape (..., n, 3). Returns
    ``(R, degenerate)`` where degenerate entries (cross-covariance of rank < 2)
    carry the identity.
    """
    a = np.asarray(source_offsets, dtype=float)
    b = np.asarray(target_offsets, dtype=float)
    if mask is not None:
        w = np.asarray(mask, dtype=float)[..., None]
        a = a * w
    cov = np.einsum("...ni,...nj->...ij", a, b)
    u, s, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(vt.swapaxes(-1, -2) @ u.swapaxes(-1, -2)))
    d = np.where(d == 0, 1.0, d)
    vt[..., 2, :] *= d[..., None]
    rot = vt.swapaxes(-1, -2) @ u.swapaxes(-1, -2)
    degenerate = ~(s[..., 1] > DEGENERATE_RATIO * s[..., 0])
    if np.any(degenerate):
        rot[degenerate] = np.eye(3)
    return rot, degenerate


def per_vertex_transform(target: TriMesh, reference: TriMesh, adjacency, vertex: int) -> RigidTransform:
    """Rigid transform carrying ``vertex``'s neighborhood from target to reference."""
    if target.vertex_count != reference.vertex_count:
        raise InputError("meshes do not share topology")
    nbrs = np.asarray(adjacency[vertex])
    a = target.vertices[nbrs] - target.vertices[vertex]
    b = reference.vertices[nbrs] - reference.vertices[vertex]
    rot, degenerate = kabsch_rotation(a, b)
    if degenerate:
        raise DegenerateNeighborhoodError(vertex)
    return RigidTransform(rot, reference.vertices[vertex] - rot @ target.vertices[vertex])


def all_vertex_transforms(target: TriMesh, reference: TriMesh, adjacency) -> VertexTransforms:
    """Batched :func:`per_vertex_transform`; degenerate vertices get (I, v_r - v_t) and a flag."""
    if target.vertex_count != reference.vertex_count:
        raise InputError("meshes do not share topology")
    if isinstance(adjacency, tuple):
        index, mask = adjacency
    else:
        index, mask = pad_neighborhoods(adjacency)
    vt, vr = target.vertices, reference.vertices
    a = vt[index] - vt[:, None, :]
    b = vr[index] - vr[:, None, :]
    rot, degenerate = kabsch_rotation(a, b, mask)
    trans = vr - np.einsum("vij,vj->vi", rot, vt)
    if np.any(degenerate):
        log.warning("%d degenerate vertex neighborhoods fell back to identity rotation",
                    int(degenerate.sum()))
    return VertexTransforms(rot, trans, degenerate)


# --------------------------------------------------------------------------- file I/O

def read_obj(path) -> TriMesh:
    """Read ``v``/``f`` records of a Wavefront OBJ file; other records are ignored."""
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                    if len(idx) != 3:
                        raise InputError(f"{path}:{lineno}: only triangular faces are supported")
                    faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
    if not verts:
        raise InputError(f"{path}: no vertices")
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(path, mesh: TriMesh) -> None:
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in (mesh.faces + 1).tolist():
            fh.write(f"f {a} {b} {c}\n")


def read_sequence(paths, frame_rate: float = 30.0) -> TriMeshSequence:
    meshes = [read_obj(p) for p in paths]
    topology = meshes[0].faces
    for p, m in zip(paths, meshes):
        if not np.array_equal(m.faces, topology):
            raise InputError(f"{os.fspath(p)}: face list differs from the first frame")
    return TriMeshSequence([m.vertices for m in meshes], topology, frame_rate)
