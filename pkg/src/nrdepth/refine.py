"""Bounded detail maps and their direct optimization against the photo-consistency loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import InputError, NumericalError
from .masks import FrameTuple
from .photometric import LossBreakdown, LossWeights, composed_depth, loss_and_gradient
from .raster import DepthMap

log = logging.getLogger(__name__)

DETAIL_BOUND = 0.1


def bounded_offset(raw) -> np.ndarray:
    """Affine sigmoid mapping unbounded parameters into (-0.1, 0.1) meters."""
    raw = np.asarray(raw, dtype=float)
    # tanh form of 0.2 * sigmoid(raw) - 0.1, stable for large |raw|
    return DETAIL_BOUND * np.tanh(0.5 * raw)


def offset_slope(raw) -> np.ndarray:
    t = np.tanh(0.5 * np.asarray(raw, dtype=float))
    return 0.5 * DETAIL_BOUND * (1.0 - t * t)


def raw_from_offset(offset) -> np.ndarray:
    offset = np.asarray(offset, dtype=float)
    if np.any(np.abs(offset) >= DETAIL_BOUND):
        raise InputError("offsets must lie strictly inside (-0.1, 0.1) m")
    return 2.0 * np.arctanh(offset / DETAIL_BOUND)


@dataclass
class DetailMap:
    raw: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "DetailMap":
        return cls(np.zeros(shape))

    @classmethod
    def from_offset(cls, offset) -> "DetailMap":
        return cls(raw_from_offset(offset))

    @property
    def offset(self) -> np.ndarray:
        return bounded_offset(self.raw)

    @property
    def shape(self):
        return self.raw.shape


def compose_depth(base: DepthMap, detail: DetailMap) -> DepthMap:
    if base.values.shape != detail.shape:
        raise InputError(f"detail map {detail.shape} does not match base depth {base.values.shape}")
    return composed_depth(base, detail.offset)


def zero_median_normalize(depth: DepthMap) -> np.ndarray:
    """Depth minus its median over valid pixels; invalid pixels keep NaN."""
    out = np.full(depth.values.shape, np.nan)
    if np.any(depth.valid):
        vals = depth.values[depth.valid]
        out[depth.valid] = vals - np.median(vals)
    return out


@dataclass
class OptimizerConfig:
    step: float = 1e-2
    iterations: int = 300
    tolerance: float = 1e-6
    patience: int = 20
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.step > 0:
            raise InputError("optimizer step must be positive")
        if self.iterations < 0:
            raise InputError("iteration budget must be non-negative")


@dataclass
class OptimizationResult:
    detail: DetailMap
    trace: list = field(default_factory=list)
    best_iteration: int = 0

    @property
    def best(self) -> LossBreakdown:
        return self.trace[self.best_iteration]


def _check_finite(name, arr):
    bad = ~np.isfinite(arr)
    if np.any(bad):
        pix = np.argwhere(bad)
        raise NumericalError(f"non-finite {name} at {len(pix)} pixel(s), first {tuple(pix[0])}", pix)


def optimize_detail(tup: FrameTuple, config: OptimizerConfig = OptimizerConfig(),
                    weights: LossWeights = LossWeights(), init: DetailMap | None = None) -> OptimizationResult:
    """Adam descent on the raw detail parameters; returns the best iterate seen.

    ``trace[k]`` is the loss of the k-th iterate, ``trace[0]`` the initial one.
    The update is deterministic; ``config.seed`` only labels the run.
    """
    raw = np.zeros(tup.base.values.shape) if init is None else np.array(init.raw, dtype=float)
    support = tup.base.valid
    m = np.zeros_like(raw)
    v = np.zeros_like(raw)
    trace = []
    best_raw, best_loss, best_iter = raw.copy(), np.inf, 0
    for it in range(config.iterations + 1):
        breakdown, grad = loss_and_gradient(tup, bounded_offset(raw), weights)
        if not np.isfinite(breakdown.total):
            raise NumericalError(f"non-finite loss at iteration {it}")
        _check_finite("gradient", grad)
        trace.append(breakdown)
        if breakdown.total < best_loss:
            best_raw, best_loss, best_iter = raw.copy(), breakdown.total, it
        if it == config.iterations:
            break
        if it >= config.patience:
            prev = trace[it - config.patience].total
            if prev - breakdown.total <= config.tolerance * abs(prev):
                log.info("early stop at iteration %d", it)
                break
        g = grad * offset_slope(raw)
        m = config.beta1 * m + (1 - config.beta1) * g
        v = config.beta2 * v + (1 - config.beta2) * g * g
        mhat = m / (1 - config.beta1 ** (it + 1))
        vhat = v / (1 - config.beta2 ** (it + 1))
        raw = raw - config.step * mhat / (np.sqrt(vhat) + config.eps)
        raw[~support] = 0.0
    return OptimizationResult(DetailMap(best_raw), trace, best_iter)


class DetailPredictor(Protocol):
    """Anything that maps a frame tuple to a bounded detail map.

    Learned predictors consume :func:`predictor_inputs`; the built-in one
    optimizes the tuple's loss directly.
    """

    def __call__(self, tup: FrameTuple) -> DetailMap: ...


def predictor_inputs(tup: FrameTuple) -> tuple[np.ndarray, np.ndarray]:
    """Target image and zero-median base depth (NaN off the silhouette)."""
    return tup.image, zero_median_normalize(tup.base)


class OptimizingPredictor:
    def __init__(self, config: OptimizerConfig = OptimizerConfig(), weights: LossWeights = LossWeights()):
        self.config = config
        self.weights = weights
        self.last_result: OptimizationResult | None = None

    def __call__(self, tup: FrameTuple) -> DetailMap:
        self.last_result = optimize_detail(tup, self.config, self.weights)
        return self.last_result.detail


class ZeroPredictor:
    """Returns the base depth unchanged."""

    def __call__(self, tup: FrameTuple) -> DetailMap:
        return DetailMap.zeros(tup.base.values.shape)
