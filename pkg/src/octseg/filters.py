"""3D intensity filters used to denoise volumes and enhance layer boundaries.

All filters take a bare ``(frames, depth, width)`` array (see
:mod:`octseg.volume` for the axis convention) and a kernel size given as
``(k1, k2, k3)`` counted along (x, y, z).  Borders never wrap or reflect:
windows are truncated to the volume and statistics are renormalized over
the voxels actually inside, so a constant volume stays constant (mean) or
identically zero (differential) all the way to the faces.

Even kernel sizes are anchored at the floor: a window of size k covers
``[c - k//2, c + (k - k//2) - 1]`` around centre c.
"""

from __future__ import annotations

import math
from enum import Enum

import numpy as np
from scipy import ndimage


class Orientation(Enum):
    """Which side of a boundary is expected to be brighter.

    BRIGHT_ABOVE responds positively when intensity above the window centre
    (smaller z) exceeds intensity below; BRIGHT_BELOW is its exact negation.
    """

    BRIGHT_ABOVE = "bright_above"
    BRIGHT_BELOW = "bright_below"


# kernel components (k1, k2, k3) = (x, y, z) live on array axes (2, 0, 1)
_AXIS_OF = {"k1": 2, "k2": 0, "k3": 1}


def _check_size(shape: tuple[int, int, int], size: tuple[int, int, int]) -> None:
    k1, k2, k3 = size
    frames, depth, width = shape
    for name, k, dim in (("k1", k1, width), ("k2", k2, frames), ("k3", k3, depth)):
        if not isinstance(k, (int, np.integer)) or k < 1:
            raise ValueError(f"{name} must be a positive integer, got {k!r}")
        if k > dim:
            raise ValueError(f"{name}={k} exceeds the volume extent {dim} on that axis")


def _window_sum(arr: np.ndarray, axis: int, a: int, b: int) -> tuple[np.ndarray, np.ndarray]:
    """In-bounds sliding sum over index window [i+a, i+b] along ``axis``.

    Returns (sums, counts) where counts is the 1D number of in-bounds
    samples per position; empty windows sum to 0.
    """
    x = np.moveaxis(arr, axis, -1)
    n = x.shape[-1]
    # Integer inputs accumulate in int64 so every window sum is exact and
    # the final division is the only rounding step.
    acc = np.int64 if arr.dtype.kind in "iub" else np.float64
    csum = np.empty(x.shape[:-1] + (n + 1,), dtype=acc)
    csum[..., 0] = 0
    np.cumsum(x, axis=-1, out=csum[..., 1:])
    idx = np.arange(n)
    hi = np.clip(idx + b, -1, n - 1) + 1  # exclusive
    lo = np.clip(idx + a, 0, n)
    counts = np.maximum(hi - lo, 0)
    sums = csum[..., hi] - csum[..., lo]
    if np.any(counts == 0):
        sums[..., counts == 0] = 0
    return np.moveaxis(sums, -1, axis), counts


def _bounds(k: int) -> tuple[int, int]:
    """Window offsets [-lo, +hi] for a size-k kernel (floor-anchored when even)."""
    lo = k // 2
    return lo, k - 1 - lo


def _axis_counts(counts: np.ndarray, axis: int) -> np.ndarray:
    """Reshape a 1D per-position count so it broadcasts along ``axis`` of a 3D array."""
    shape = [1, 1, 1]
    shape[axis] = counts.size
    return counts.reshape(shape)


def mean_filter(vol: np.ndarray, size: tuple[int, int, int]) -> np.ndarray:
    """Box mean with border renormalization; float64 output.

    Each voxel becomes the average of the in-bounds voxels inside the
    (k1, k2, k3) window, so values stay within the input range and a
    uniform volume is returned unchanged.
    """
    vol = np.asarray(vol)
    _check_size(vol.shape, size)
    k1, k2, k3 = size
    sums = vol
    per_axis_counts = []
    for name, k in (("k1", k1), ("k2", k2), ("k3", k3)):
        if k == 1:
            continue
        axis = _AXIS_OF[name]
        lo, hi = _bounds(k)
        sums, counts = _window_sum(sums, axis, -lo, hi)
        per_axis_counts.append((axis, counts))
    if sums is vol:  # 1x1x1 kernel
        return vol.astype(np.float64)
    denom = np.ones((1, 1, 1), dtype=np.int64)
    for axis, counts in per_axis_counts:
        denom = denom * _axis_counts(counts, axis)
    # One division total: exact sums make integral means come out exact.
    return np.true_divide(sums, denom)


def diff_filter(
    vol: np.ndarray, size: tuple[int, int, int], orientation: Orientation
) -> np.ndarray:
    """Directional axial difference: (mean above centre - mean below) / 2.

    The window's centre plane carries weight zero and the two half-windows
    are averaged independently, which keeps a constant volume at exactly
    zero even where the window is truncated by a border.  In the interior
    this equals the signed window sum divided by k1*k2*(k3-1).  Voxels
    whose window has an empty half (first/last ``(k3-1)//2`` planes) map
    to zero.  BRIGHT_BELOW negates the result voxel for voxel.
    """
    vol = np.asarray(vol)
    _check_size(vol.shape, size)
    k1, k2, k3 = size
    if k3 < 2:
        raise ValueError("differential filter needs k3 >= 2")
    if k3 % 2 == 0:
        raise ValueError(f"k3 must be odd so the centre plane is unambiguous, got {k3}")
    half = (k3 - 1) // 2

    lateral = vol
    lat_denom = np.ones((1, 1, 1), dtype=np.int64)
    for name, k in (("k1", k1), ("k2", k2)):
        if k == 1:
            continue
        axis = _AXIS_OF[name]
        lo, hi = _bounds(k)
        lateral, counts = _window_sum(lateral, axis, -lo, hi)
        lat_denom = lat_denom * _axis_counts(counts, axis)

    zaxis = _AXIS_OF["k3"]
    above, n_above = _window_sum(lateral, zaxis, -half, -1)
    below, n_below = _window_sum(lateral, zaxis, 1, half)
    del lateral
    # Either half empty -> no axial contrast measurable -> 0.
    valid = (n_above > 0) & (n_below > 0)
    # One division per half keeps each half-mean correctly rounded.
    out = np.true_divide(above, lat_denom * _axis_counts(np.maximum(n_above, 1), zaxis))
    del above
    out -= np.true_divide(below, lat_denom * _axis_counts(np.maximum(n_below, 1), zaxis))
    del below
    out *= 0.5
    out[:, ~valid, :] = 0.0
    if orientation is Orientation.BRIGHT_BELOW:
        np.negative(out, out=out)
    return out


def threshold_zero(vol: np.ndarray, t: float) -> np.ndarray:
    """Zero every voxel strictly below ``t``; voxels at or above keep their value."""
    vol = np.asarray(vol)
    return np.where(vol < t, np.zeros((), dtype=vol.dtype), vol)


def _ball_columns(r: int) -> list[tuple[int, int, int]]:
    """Decompose the radius-r ball into z-columns: (dx, dy, z half-length)."""
    cols = []
    for dx in range(-r, r + 1):
        for dy in range(-r, r + 1):
            s = r * r - dx * dx - dy * dy
            if s >= 0:
                cols.append((dx, dy, math.isqrt(s)))
    return cols


def erode_ball(vol: np.ndarray, r: int) -> np.ndarray:
    """Grayscale erosion by a Euclidean ball of radius ``r`` (in-bounds minimum).

    Every voxel becomes the minimum over all in-bounds voxels within
    distance <= r.  Implemented exactly by splitting the ball into z
    columns: one 1D minimum filter per distinct column half-length, then a
    shifted minimum per (dx, dy) column position.  r = 0 is the identity.
    """
    vol = np.asarray(vol)
    if not isinstance(r, (int, np.integer)) or r < 0:
        raise ValueError(f"radius must be a non-negative integer, got {r!r}")
    if r == 0:
        return vol.copy()

    cols = _ball_columns(r)
    zmins: dict[int, np.ndarray] = {}
    for _, _, h in cols:
        if h not in zmins:
            if h == 0:
                zmins[h] = vol
            else:
                # 'nearest' replication equals in-bounds min: the replicated
                # edge voxel is itself inside every truncated window.
                zmins[h] = ndimage.minimum_filter1d(vol, 2 * h + 1, axis=1, mode="nearest")

    frames, _, width = vol.shape
    out = zmins[r].copy()  # the (0, 0) column
    for dx, dy, h in cols:
        if dx == 0 and dy == 0:
            continue
        if abs(dy) >= frames or abs(dx) >= width:
            continue  # shifted column lies outside for every voxel
        src = zmins[h]
        ys_dst = slice(max(0, -dy), frames - max(0, dy))
        ys_src = slice(max(0, dy), frames - max(0, -dy))
        xs_dst = slice(max(0, -dx), width - max(0, dx))
        xs_src = slice(max(0, dx), width - max(0, -dx))
        dst = out[ys_dst, :, xs_dst]
        np.minimum(dst, src[ys_src, :, xs_src], out=dst)
    return out
