"""Depth-map post-processing: outlier detection, smoothing, merging.

A depth map is a ``(frames, width)`` float array giving one surface depth
per A-scan.  Raw per-A-scan extraction leaves isolated blunders (vessel
shadows, speckle); the tools here repair them by comparing each entry with
a weighted average of its neighbourhood.
"""

from __future__ import annotations

from dataclasses import dataclass
from statistics import NormalDist

import numpy as np
from scipy import ndimage


def _as_weight_array(m) -> np.ndarray:
    w = np.asarray(m, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
        raise ValueError(f"weight matrix must be square with odd side, got {w.shape}")
    return w


@dataclass(frozen=True)
class WeightMatrices:
    """A smoothing pair: ``w1`` scores disagreement, ``w2`` builds the repair.

    ``w1`` carries a negative centre equal to minus the sum of the
    off-centre weights; ``w2`` is the same stencil with the centre zeroed.
    ``normalization`` is that off-centre sum.
    """

    w1: np.ndarray
    w2: np.ndarray
    normalization: float

    def __post_init__(self):
        w1 = _as_weight_array(self.w1)
        w2 = _as_weight_array(self.w2)
        c = w1.shape[0] // 2
        off = w1.copy()
        off[c, c] = 0.0
        if not np.isclose(off.sum(), -w1[c, c]):
            raise ValueError("w1 centre must equal minus the off-centre sum")
        if w2[c, c] != 0:
            raise ValueError("w2 centre must be zero")
        if not np.isclose(w2.sum(), self.normalization):
            raise ValueError("w2 entries must sum to the normalization")
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "w2", w2)

    @property
    def side(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def from_w1(cls, w1) -> "WeightMatrices":
        w1 = _as_weight_array(w1)
        c = w1.shape[0] // 2
        w2 = w1.copy()
        w2[c, c] = 0.0
        return cls(w1=w1, w2=w2, normalization=float(w2.sum()))

    @classmethod
    def size7(cls) -> "WeightMatrices":
        w1 = [
            [0, 1, 1, 1, 1, 1, 0],
            [1, 2, 2, 2, 2, 2, 1],
            [2, 4, 4, 4, 4, 4, 2],
            [4, 8, 16, -138, 16, 8, 4],
            [2, 4, 4, 4, 4, 4, 2],
            [1, 2, 2, 2, 2, 2, 1],
            [0, 1, 1, 1, 1, 1, 0],
        ]
        return cls.from_w1(w1)

    @classmethod
    def size5(cls) -> "WeightMatrices":
        w1 = [
            [0, 1, 2, 1, 0],
            [1, 4, 8, 4, 1],
            [2, 8, -64, 8, 2],
            [1, 4, 8, 4, 1],
            [0, 1, 2, 1, 0],
        ]
        return cls.from_w1(w1)

    @classmethod
    def size3(cls) -> "WeightMatrices":
        return cls.from_w1([[1, 2, 1], [2, -12, 2], [1, 2, 1]])


@dataclass(frozen=True)
class SmoothingSchedule:
    """Iteration plan for :func:`smooth_depth_map`.

    The first ``dynamic_iterations`` use a threshold that grows with the
    iteration index, ``entries * i / divisor``; the remaining iterations
    use the fixed ``final_threshold``.
    """

    iterations: int = 25
    dynamic_iterations: int = 20
    divisor: float = 2000.0
    final_threshold: float = 1.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 <= self.dynamic_iterations <= self.iterations:
            raise ValueError("dynamic_iterations must lie within [0, iterations]")
        if not self.divisor > 0:
            raise ValueError("divisor must be positive")
        if self.final_threshold < 0:
            raise ValueError("final_threshold must be non-negative")


def dynamic_threshold(i: int, sched: SmoothingSchedule, entries: int) -> float:
    """Error-point threshold for 1-based iteration ``i`` on a map of ``entries`` cells."""
    if i < 1:
        raise ValueError("iteration index is 1-based")
    if i <= sched.dynamic_iterations:
        return entries * i / sched.divisor
    return sched.final_threshold


def _neighbor_average(a: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted average of each entry's neighbours (centre weight ignored).

    Out-of-bounds neighbours are dropped and the remaining weights
    renormalized, so border entries are compared against their true
    neighbourhood rather than zero padding.
    """
    w = np.asarray(weights, dtype=np.float64).copy()
    c = w.shape[0] // 2
    w[c, c] = 0.0
    num = ndimage.correlate(a, w, mode="constant", cval=0.0)
    den = ndimage.correlate(np.ones_like(a), w, mode="constant", cval=0.0)
    # A map smaller than the stencil can strand a cell with no neighbours.
    safe = den != 0
    out = np.where(safe, num / np.where(safe, den, 1.0), a)
    return out


def error_distance_map(a: np.ndarray, w1: np.ndarray) -> np.ndarray:
    """|neighbour average - entry| for every entry of the map, in pixels."""
    a = np.asarray(a, dtype=np.float64)
    return np.abs(_neighbor_average(a, w1) - a)


def error_distance(a: np.ndarray, w1: np.ndarray, at: tuple[int, int]) -> float:
    """Error distance of a single entry; ``at`` is (frame, column)."""
    return float(error_distance_map(a, w1)[at])


def smooth_depth_map(
    a: np.ndarray,
    w1: np.ndarray,
    w2: np.ndarray,
    sched: SmoothingSchedule = SmoothingSchedule(),
) -> tuple[np.ndarray, int]:
    """Iteratively replace error points with their neighbourhood consensus.

    Per iteration every entry whose error distance exceeds the iteration's
    threshold is replaced, simultaneously, by its ``w2``-weighted neighbour
    average computed from the map as it stood at the start of the
    iteration.  Stops as soon as an iteration finds no error points.

    Returns (smoothed map, iterations actually run).
    """
    out = np.array(a, dtype=np.float64, copy=True)
    if out.ndim != 2:
        raise ValueError(f"depth map must be 2D, got shape {out.shape}")
    entries = out.size
    for i in range(1, sched.iterations + 1):
        t = dynamic_threshold(i, sched, entries)
        ed = np.abs(_neighbor_average(out, w1) - out)
        bad = ed > t
        if not bad.any():
            return out, i
        correction = _neighbor_average(out, w2)
        out[bad] = correction[bad]
    return out, sched.iterations


@dataclass
class Poly3Result:
    depths: np.ndarray
    replaced: np.ndarray  # bool mask of replaced points
    degraded: bool  # True when fewer than 4 inliers survived


def poly3_reject(
    depths: np.ndarray,
    x: np.ndarray | None = None,
    confidence: float = 0.98,
) -> Poly3Result:
    """Replace cubic-trend outliers along one B-scan row of surface depths.

    A cubic is least-squares fitted to (x, depth); points whose residual
    exceeds q * sigma, with q the standard-normal quantile at
    (1 + confidence) / 2 and sigma the residual standard deviation, are
    declared noise.  The cubic is refitted on the surviving inliers and the
    noise points take the refitted values.  With fewer than 4 inliers no
    trustworthy refit exists: the row is returned unchanged and flagged.
    """
    z = np.asarray(depths, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError(f"expected a 1D row of depths, got shape {z.shape}")
    if not 0 < confidence < 1:
        raise ValueError(f"confidence must be in (0, 1), got {confidence}")
    if x is None:
        x = np.arange(z.size, dtype=np.float64)
    else:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != z.shape:
            raise ValueError("x and depths must have the same length")
    if z.size < 4:
        return Poly3Result(z.copy(), np.zeros(z.size, dtype=bool), True)

    q = NormalDist().inv_cdf((1 + confidence) / 2)
    fit = np.polynomial.Polynomial.fit(x, z, 3)
    resid = z - fit(x)
    # RMS rather than centred std: the basis already carries the constant
    # term, and RMS keeps a numerically exact fit from flagging its own
    # rounding noise as outliers.  Spread below a nanopixel is rounding
    # noise too, never anatomy.
    sigma = float(np.sqrt(np.mean(resid * resid)))
    outliers = np.abs(resid) > q * sigma if sigma > 1e-9 else np.zeros(z.size, dtype=bool)
    if not outliers.any():
        return Poly3Result(z.copy(), outliers, False)
    inliers = ~outliers
    if inliers.sum() < 4:
        return Poly3Result(z.copy(), np.zeros(z.size, dtype=bool), True)
    refit = np.polynomial.Polynomial.fit(x[inliers], z[inliers], 3)
    corrected = z.copy()
    corrected[outliers] = refit(x[outliers])
    return Poly3Result(corrected, outliers, False)


def _box_mean_2d(a: np.ndarray, n: int) -> np.ndarray:
    """n x n box mean with in-bounds renormalization (floor-anchored if even)."""
    lo, hi = n // 2, n - 1 - n // 2
    sums = a
    denoms = []
    for axis in (0, 1):
        x = np.moveaxis(np.asarray(sums, dtype=np.float64), axis, -1)
        c = np.zeros(x.shape[:-1] + (x.shape[-1] + 1,))
        np.cumsum(x, axis=-1, out=c[..., 1:])
        idx = np.arange(x.shape[-1])
        top = np.minimum(idx + hi, x.shape[-1] - 1) + 1
        bot = np.maximum(idx - lo, 0)
        sums = np.moveaxis(c[..., top] - c[..., bot], -1, axis)
        shape = [1, 1]
        shape[axis] = idx.size
        denoms.append((top - bot).reshape(shape))
    return sums / (denoms[0] * denoms[1])


def merge_depth_maps(a: np.ndarray, b: np.ndarray, n: int = 11) -> np.ndarray:
    """Pick, per A-scan, whichever of two candidate maps hugs a's local trend.

    The reference c is the n x n box mean of ``a``.  Entry-wise the result
    is ``a`` where ``|a - c| < |b - c|`` and ``b`` otherwise, ties included,
    so the second candidate is the default when both agree equally.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"maps must be 2D and congruent, got {a.shape} vs {b.shape}")
    if n < 1 or n > max(a.shape):
        raise ValueError(f"merge window n={n} is out of range for map {a.shape}")
    c = _box_mean_2d(a, n)
    return np.where(np.abs(a - c) < np.abs(b - c), a, b)
