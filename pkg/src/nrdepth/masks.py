"""Validation masks, baseline filtering and frame-tuple assembly."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import Intrinsics
from .errors import InputError
from .mesh import TriMesh, TriMeshSequence, all_vertex_transforms, build_two_ring, pad_neighborhoods
from .raster import (VISIBILITY_TOLERANCE, DepthMap, MotionMap, RenderedView, depth_points, rasterize,
                     render_motion_map)

log = logging.getLogger(__name__)

REFERENCE_OFFSETS = (-9, -8, -7, -5, -4, 4, 5, 7, 8, 9)
PIXEL_BASELINE = 0.05
TUPLE_BASELINE = 0.5
TARGET_GAP = 3
MIN_REFERENCES = 2


@dataclass(eq=False)
class FrameTuple:
    """One target frame with its reference frames and precomputed warping inputs."""

    target: int
    references: list
    K: Intrinsics
    image: np.ndarray
    ref_images: list
    motions: list
    masks: list
    base: DepthMap
    # per-reference rendered silhouettes; samples touching background texels are ignored
    ref_silhouettes: list | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.references)
        if not (len(self.ref_images) == len(self.motions) == len(self.masks) == n):
            raise InputError("per-reference lists must have one entry per reference frame")
        shape = self.base.values.shape
        if shape != self.K.shape:
            raise InputError(f"base depth {shape} does not match intrinsics {self.K.shape}")
        for arr in [self.image, *self.ref_images]:
            if arr.shape[:2] != shape:
                raise InputError("image size does not match base depth")
        for m, mm in zip(self.motions, self.masks):
            if m.shape != shape or mm.shape != shape:
                raise InputError("motion map or mask size does not match base depth")
        if self.ref_silhouettes is not None:
            if len(self.ref_silhouettes) != n:
                raise InputError("per-reference lists must have one entry per reference frame")
            self.ref_silhouettes = [np.asarray(s, dtype=bool) for s in self.ref_silhouettes]
            if any(s.shape != shape for s in self.ref_silhouettes):
                raise InputError("reference silhouette size does not match base depth")

    @property
    def offsets(self) -> list:
        return [r - self.target for r in self.references]

    @property
    def silhouette(self) -> np.ndarray:
        return self.base.valid


def pixel_baseline(motion: MotionMap) -> np.ndarray:
    """Translation magnitude per valid pixel, 0 elsewhere."""
    out = np.linalg.norm(motion.translation, axis=-1)
    out[~motion.valid] = 0.0
    return out


def validation_mask(motion: MotionMap, target_mesh: TriMesh | None, reference_mesh: TriMesh | None,
                    K: Intrinsics, pixel_threshold: float = PIXEL_BASELINE,
                    tolerance: float = VISIBILITY_TOLERANCE,
                    target_view: RenderedView | None = None,
                    reference_view: RenderedView | None = None) -> np.ndarray:
    """Pixels visible in both views whose baseline exceeds ``pixel_threshold``.

    Renders are taken from ``target_view``/``reference_view`` when given,
    otherwise from the meshes.
    """
    if target_view is None:
        target_view = RenderedView.render(target_mesh, K)
    if reference_view is None:
        reference_view = RenderedView.render(reference_mesh, K)
    target_depth = target_view.depth
    pts = depth_points(target_depth, K)
    moved = np.einsum("hwij,hwj->hwi", motion.rotation, np.nan_to_num(pts)) + motion.translation
    moved[~target_depth.valid] = np.nan
    mask = motion.valid & target_depth.valid
    mask &= target_view.visible(pts, tolerance)
    mask &= reference_view.visible(moved, tolerance)
    mask &= pixel_baseline(motion) > pixel_threshold
    return mask


def tuple_mean_baseline(t: FrameTuple) -> float | None:
    """Mean baseline pooled over the valid pixels of every reference motion map."""
    total, count = 0.0, 0
    for m in t.motions:
        b = pixel_baseline(m)
        total += float(b[m.valid].sum())
        count += int(m.valid.sum())
    return total / count if count else None


def filter_tuples(tuples, threshold: float = TUPLE_BASELINE) -> list:
    kept = []
    for t in tuples:
        mean = tuple_mean_baseline(t)
        if mean is None:
            log.info("tuple at target %d has no valid motion pixels; removed", t.target)
        elif mean >= threshold:
            kept.append(t)
        else:
            log.info("tuple at target %d removed: mean baseline %.4f m < %.4f m", t.target, mean, threshold)
    return kept


def group_tuples(n_frames: int, gap: int = TARGET_GAP, offsets=REFERENCE_OFFSETS,
                 min_references: int = MIN_REFERENCES) -> list[tuple[int, list[int]]]:
    """Targets every ``gap`` frames, each with its in-range reference frames."""
    offsets = sorted(set(int(o) for o in offsets))
    if gap < 1:
        raise InputError("gap must be >= 1")
    if n_frames <= max(abs(o) for o in offsets):
        log.warning("sequence of %d frames is too short for offsets %s", n_frames, offsets)
        return []
    groups = []
    for target in range(0, n_frames, gap):
        refs = [target + o for o in offsets if 0 <= target + o < n_frames]
        if len(refs) >= min_references:
            groups.append((target, refs))
    return groups


def format_tuple_list(groups) -> str:
    return "".join(f"{t}: {','.join(str(r) for r in refs)}\n" for t, refs in groups)


def parse_tuple_list(text: str) -> list[tuple[int, list[int]]]:
    groups = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            head, tail = line.split(":", 1)
            refs = [int(x) for x in tail.split(",") if x.strip()]
            groups.append((int(head), refs))
        except ValueError as exc:
            raise InputError(f"tuple list line {lineno}: {line!r}") from exc
    return groups


class MotionCache:
    """Renders and registrations shared by every tuple of a mesh sequence."""

    def __init__(self, sequence: TriMeshSequence, K: Intrinsics):
        self.sequence = sequence
        self.K = K
        self.adjacency = pad_neighborhoods(build_two_ring(sequence.topology, len(sequence.frames[0])))
        self._frags = {}
        self._views = {}

    def fragments(self, i):
        if i not in self._frags:
            self._frags[i] = rasterize(self.sequence.frames[i], self.sequence.topology, self.K)
        return self._frags[i]

    def depth(self, i) -> DepthMap:
        f = self.fragments(i)
        return DepthMap(f.depth, f.valid)

    def view(self, i) -> RenderedView:
        if i not in self._views:
            self._views[i] = RenderedView(self.sequence.frames[i], self.sequence.topology, self.K, self.fragments(i))
        return self._views[i]

    def motion(self, target, reference) -> MotionMap:
        tm, rm = self.sequence.mesh(target), self.sequence.mesh(reference)
        transforms = all_vertex_transforms(tm, rm, self.adjacency)
        return render_motion_map(tm, rm, self.K, transforms, self.fragments(target))


def build_frame_tuple(cache: MotionCache, images, target: int, references,
                      pixel_threshold: float = PIXEL_BASELINE,
                      tolerance: float = VISIBILITY_TOLERANCE) -> FrameTuple:
    """Compute motion maps, validation masks and base depth for one target frame."""
    base = cache.depth(target)
    motions, masks = [], []
    for r in references:
        m = cache.motion(target, r)
        mask = validation_mask(m, None, None, cache.K, pixel_threshold, tolerance,
                               target_view=cache.view(target), reference_view=cache.view(r))
        motions.append(m)
        masks.append(mask)
    return FrameTuple(target, list(references), cache.K, images[target],
                      [images[r] for r in references], motions, masks, base,
                      [cache.view(r).fragments.valid for r in references])
