"""Shared test helpers: brute-force filter oracles and a compact phantom.

The oracles deliberately use per-voxel slicing instead of the library's
cumulative-sum path, so any agreement between the two is meaningful.
"""

from __future__ import annotations

import numpy as np

from octseg.filters import Orientation
from octseg.phantom import PhantomSpec, SurfaceSpec
from octseg.pipeline import Boundary


def window_bounds(c: int, k: int, n: int) -> tuple[int, int]:
    """In-bounds inclusive window [c - k//2, c + (k - k//2) - 1], clipped."""
    lo = max(0, c - k // 2)
    hi = min(n - 1, c + (k - k // 2) - 1)
    return lo, hi


def mean_oracle(vol: np.ndarray, size: tuple[int, int, int]) -> np.ndarray:
    k1, k2, k3 = size
    frames, depth, width = vol.shape
    out = np.empty(vol.shape, dtype=np.float64)
    v = vol.astype(np.float64)
    for y in range(frames):
        ylo, yhi = window_bounds(y, k2, frames)
        for z in range(depth):
            zlo, zhi = window_bounds(z, k3, depth)
            for x in range(width):
                xlo, xhi = window_bounds(x, k1, width)
                out[y, z, x] = v[ylo : yhi + 1, zlo : zhi + 1, xlo : xhi + 1].mean()
    return out


def diff_oracle(
    vol: np.ndarray, size: tuple[int, int, int], orientation: Orientation
) -> np.ndarray:
    k1, k2, k3 = size
    half = k3 // 2
    frames, depth, width = vol.shape
    v = vol.astype(np.float64)
    out = np.zeros(vol.shape, dtype=np.float64)
    for y in range(frames):
        ylo, yhi = window_bounds(y, k2, frames)
        for z in range(depth):
            alo, ahi = max(0, z - half), z - 1
            blo, bhi = z + 1, min(depth - 1, z + half)
            if ahi < alo or bhi < blo:
                continue  # one half entirely out of bounds: defined as 0
            for x in range(width):
                xlo, xhi = window_bounds(x, k1, width)
                above = v[ylo : yhi + 1, alo : ahi + 1, xlo : xhi + 1].mean()
                below = v[ylo : yhi + 1, blo : bhi + 1, xlo : xhi + 1].mean()
                val = 0.5 * (above - below)
                out[y, z, x] = val if orientation is Orientation.BRIGHT_ABOVE else -val
    return out


def erode_oracle(vol: np.ndarray, r: int) -> np.ndarray:
    frames, depth, width = vol.shape
    offsets = [
        (dy, dz, dx)
        for dy in range(-r, r + 1)
        for dz in range(-r, r + 1)
        for dx in range(-r, r + 1)
        if dy * dy + dz * dz + dx * dx <= r * r
    ]
    out = np.empty_like(vol)
    for y in range(frames):
        for z in range(depth):
            for x in range(width):
                best = vol[y, z, x]
                for dy, dz, dx in offsets:
                    yy, zz, xx = y + dy, z + dz, x + dx
                    if 0 <= yy < frames and 0 <= zz < depth and 0 <= xx < width:
                        if vol[yy, zz, xx] < best:
                            best = vol[yy, zz, xx]
                out[y, z, x] = best
    return out


def threshold_oracle(vol: np.ndarray, t: int) -> np.ndarray:
    out = np.empty_like(vol)
    frames, depth, width = vol.shape
    for y in range(frames):
        for z in range(depth):
            for x in range(width):
                v = vol[y, z, x]
                out[y, z, x] = 0 if v < t else v
    return out


def assert_filter_match(got: np.ndarray, want: np.ndarray):
    """Exact where the oracle value is integral, 1e-9 relative elsewhere."""
    integral = want == np.rint(want)
    assert np.array_equal(got[integral], want[integral])
    if not integral.all():
        sel = ~integral
        np.testing.assert_allclose(got[sel], want[sel], rtol=1e-9, atol=0)


def small_spec(seed: int = 0, **overrides) -> PhantomSpec:
    """A compact retina that still fits every default kernel (frames >= 15)."""
    bases = {
        Boundary.VITREOUS_ILM: 50.0,
        Boundary.NFL_GCL: 70.0,
        Boundary.IPL_INL: 95.0,
        Boundary.INL_OPL: 107.0,
        Boundary.OPL_ONL: 120.0,
        Boundary.ONL_ISOS: 145.0,
        Boundary.RPE_CHOROID: 158.0,
    }
    dips = {
        Boundary.VITREOUS_ILM: 6.0,
        Boundary.NFL_GCL: 4.4,
        Boundary.IPL_INL: 2.8,
        Boundary.INL_OPL: 2.2,
        Boundary.OPL_ONL: 1.6,
        Boundary.ONL_ISOS: 0.6,
        Boundary.RPE_CHOROID: 0.0,
    }
    surfaces = {
        b: SurfaceSpec(base=bases[b], amplitude=3.0, wavelength=120.0,
                       fovea_depth=dips[b], fovea_width=20.0)
        for b in bases
    }
    params = dict(width=64, frames=18, depth=176, surfaces=surfaces, seed=seed)
    params.update(overrides)
    return PhantomSpec(**params)
