"""Point-cloud evaluation: ICP alignment, accuracy at thresholds and MAE."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .camera import Intrinsics
from .errors import InputError
from .mesh import RigidTransform, kabsch_rotation
from .raster import DepthMap, depth_points

log = logging.getLogger(__name__)

THRESHOLDS = (0.01, 0.02, 0.04)


def depth_to_cloud(depth: DepthMap, K: Intrinsics) -> np.ndarray:
    """Unproject every valid pixel, row-major order, shape (N, 3)."""
    if depth.values.shape != K.shape:
        raise InputError(f"depth map {depth.values.shape} does not match intrinsics {K.shape}")
    return depth_points(depth, K)[depth.valid]


def _check_cloud(name, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InputError(f"{name} cloud must have shape (N, 3), got {pts.shape}")
    if len(pts) == 0:
        raise InputError(f"{name} cloud is empty")
    if not np.all(np.isfinite(pts)):
        raise InputError(f"{name} cloud has non-finite coordinates")
    return pts


def rigid_fit(source, target) -> RigidTransform:
    """Least-squares rigid transform between corresponding point sets."""
    cs, ct = source.mean(axis=0), target.mean(axis=0)
    rot, _ = kabsch_rotation(source - cs, target - ct)
    return RigidTransform(rot, ct - rot @ cs)


@dataclass
class ICPResult:
    transform: RigidTransform
    iterations: int
    converged: bool
    history: list = field(default_factory=list)  # mean squared correspondence distance


def icp_register(source, target, iterations: int = 100, tolerance: float = 1e-12,
                 trim: float = 0.0) -> ICPResult:
    """Point-to-point ICP returning the source -> target transform.

    ``trim`` drops that fraction of worst correspondences before each update.
    Stops when the correspondence set repeats or the mean squared distance
    improves by less than ``tolerance``.
    """
    source = _check_cloud("source", source)
    target = _check_cloud("target", target)
    tree = cKDTree(target)
    rot, trans = np.eye(3), np.zeros(3)
    prev_idx, prev_err = None, np.inf
    history = []
    keep_n = max(3, int(np.ceil(len(source) * (1.0 - trim))))
    converged = False
    it = 0
    for it in range(1, iterations + 1):
        moved = source @ rot.T + trans
        dist, idx = tree.query(moved)
        if keep_n < len(source):
            sel = np.sort(np.argsort(dist, kind="stable")[:keep_n])
        else:
            sel = np.arange(len(source))
        err = float(np.mean(dist[sel] ** 2))
        history.append(err)
        if prev_idx is not None and np.array_equal(idx[sel], prev_idx[0]) and np.array_equal(sel, prev_idx[1]):
            converged = True
            break
        if prev_err - err < tolerance * max(prev_err, 1e-300) and err == 0.0:
            converged = True
            break
        fit = rigid_fit(source[sel], target[idx[sel]])
        rot, trans = fit.rotation, fit.translation
        prev_idx, prev_err = (idx[sel], sel), err
    return ICPResult(RigidTransform(rot, trans), it, converged, history)


@dataclass
class Metrics:
    thresholds: tuple
    accuracy: tuple   # percent of result points with error below each threshold
    mae: float        # meters
    count: int


def nearest_distances(result, truth) -> np.ndarray:
    return cKDTree(truth).query(result)[0]


def accuracy_and_mae(result, truth, thresholds=THRESHOLDS) -> Metrics:
    result = _check_cloud("result", result)
    truth = _check_cloud("truth", truth)
    err = nearest_distances(result, truth)
    acc = tuple(100.0 * float(np.mean(err < t)) for t in thresholds)
    return Metrics(tuple(thresholds), acc, float(err.mean()), len(err))


@dataclass
class Evaluation:
    metrics: Metrics
    errors: np.ndarray          # per result point, meters
    icp: ICPResult | None = None


def evaluate_clouds(result, truth, thresholds=THRESHOLDS, register: bool = True,
                    trim: float = 0.0, iterations: int = 100) -> Evaluation:
    """Register ``result`` onto ``truth`` (optional) and score it."""
    result = _check_cloud("result", result)
    truth = _check_cloud("truth", truth)
    icp = None
    if register:
        icp = icp_register(result, truth, iterations=iterations, trim=trim)
        result = icp.transform.apply(result)
    err = nearest_distances(result, truth)
    acc = tuple(100.0 * float(np.mean(err < t)) for t in thresholds)
    return Evaluation(Metrics(tuple(thresholds), acc, float(err.mean()), len(err)), err, icp)


# --------------------------------------------------------------------------- reports

def format_table(rows) -> str:
    """Aligned table with one row per ``(label, Metrics)``, MAE in centimeters."""
    rows = list(rows)
    thresholds = rows[0][1].thresholds
    heads = [f"{100 * t:.1f}cm" for t in thresholds]
    width = max(6, max(len(r[0]) for r in rows))
    lines = [f"{'Method':<{width}}  " + "  ".join(f"{h:>7}" for h in heads) + f"  {'MAE':>7}"]
    for label, m in rows:
        cells = "  ".join(f"{a:>7.2f}" for a in m.accuracy)
        lines.append(f"{label:<{width}}  {cells}  {100 * m.mae:>7.3f}")
    return "\n".join(lines) + "\n"


def format_key_values(m: Metrics, prefix: str = "") -> str:
    lines = [f"{prefix}acc_{100 * t:.1f}cm = {a:.6f}" for t, a in zip(m.thresholds, m.accuracy)]
    lines.append(f"{prefix}mae_m = {m.mae:.9f}")
    lines.append(f"{prefix}points = {m.count}")
    return "\n".join(lines) + "\n"


def read_xyz(path) -> np.ndarray:
    try:
        pts = np.loadtxt(path, ndmin=2, usecols=(0, 1, 2))
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read point cloud {path}: {exc}") from exc
    return pts


def write_xyz(path, pts) -> None:
    with open(path, "w") as fh:
        for x, y, z in np.asarray(pts, dtype=float).tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")
