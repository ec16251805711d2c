"""Seven-boundary segmentation pipeline.

Each stage follows the same shape: enhance the boundary's step profile
with a directional differential filter (optionally blended with a local
mean), pick one depth per A-scan, then repair the depth map with the
iterative neighbourhood smoother.  The deepest surface (RPE-choroid) is
found first on the raw volume and used to flatten it; every other surface
is found in flattened coordinates inside the corridor left by previously
found neighbours, then shifted back.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from octseg.filters import (
    Orientation,
    diff_filter,
    erode_ball,
    mean_filter,
    threshold_zero,
)
from octseg.surface import (
    SmoothingSchedule,
    WeightMatrices,
    merge_depth_maps,
    poly3_reject,
    smooth_depth_map,
)
from octseg.volume import (
    FlattenOffsets,
    Volume,
    flatten_volume,
    load_depth_map,
    save_depth_map,
    unflatten_depths,
)


class ConfigError(ValueError):
    """Configuration rejected before any voxel work starts."""


class Boundary(Enum):
    """The seven retinal boundaries, named by the tissues they separate."""

    VITREOUS_ILM = "vitreous_ilm"
    NFL_GCL = "nfl_gcl"
    IPL_INL = "ipl_inl"
    INL_OPL = "inl_opl"
    OPL_ONL = "opl_onl"
    ONL_ISOS = "onl_isos"
    RPE_CHOROID = "rpe_choroid"


#: top-down anatomical order; depth must be non-decreasing along this tuple
ANATOMICAL_ORDER: tuple[Boundary, ...] = (
    Boundary.VITREOUS_ILM,
    Boundary.NFL_GCL,
    Boundary.IPL_INL,
    Boundary.INL_OPL,
    Boundary.OPL_ONL,
    Boundary.ONL_ISOS,
    Boundary.RPE_CHOROID,
)

#: which side of each boundary is brighter; INL-OPL is configurable because
#: the INL is dark and the OPL bright on most scans, but not on all scanners
DEFAULT_ORIENTATION: dict[Boundary, Orientation] = {
    Boundary.VITREOUS_ILM: Orientation.BRIGHT_BELOW,
    Boundary.NFL_GCL: Orientation.BRIGHT_ABOVE,
    Boundary.IPL_INL: Orientation.BRIGHT_ABOVE,
    Boundary.INL_OPL: Orientation.BRIGHT_BELOW,
    Boundary.OPL_ONL: Orientation.BRIGHT_ABOVE,
    Boundary.ONL_ISOS: Orientation.BRIGHT_BELOW,
    Boundary.RPE_CHOROID: Orientation.BRIGHT_ABOVE,
}

_BOUNDARY_FILES = {
    b: f"{i + 1:02d}_{b.value}" for i, b in enumerate(ANATOMICAL_ORDER)
}


@dataclass
class BoundarySet:
    """Seven depth maps keyed by :class:`Boundary`, all (frames, width)."""

    depths: dict[Boundary, np.ndarray]

    def __post_init__(self):
        missing = [b for b in ANATOMICAL_ORDER if b not in self.depths]
        if missing:
            raise ValueError(f"missing boundaries: {[b.value for b in missing]}")
        shapes = {self.depths[b].shape for b in ANATOMICAL_ORDER}
        if len(shapes) != 1:
            raise ValueError(f"inconsistent depth-map shapes: {shapes}")

    def __getitem__(self, b: Boundary) -> np.ndarray:
        return self.depths[b]

    @property
    def shape(self) -> tuple[int, int]:
        return self.depths[Boundary.VITREOUS_ILM].shape

    def ordering_violations(self) -> int:
        """Number of A-scans where any adjacent pair is out of order."""
        bad = np.zeros(self.shape, dtype=bool)
        for upper, lower in zip(ANATOMICAL_ORDER, ANATOMICAL_ORDER[1:]):
            bad |= self.depths[upper] > self.depths[lower]
        return int(bad.sum())

    def save_dir(self, directory: str | Path) -> list[Path]:
        """Write one CSV per boundary with stable, order-prefixed names."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        return [
            save_depth_map(self.depths[b], directory / f"{_BOUNDARY_FILES[b]}.csv")
            for b in ANATOMICAL_ORDER
        ]

    @classmethod
    def load_dir(cls, directory: str | Path) -> "BoundarySet":
        directory = Path(directory)
        depths = {}
        for b in ANATOMICAL_ORDER:
            p = directory / f"{_BOUNDARY_FILES[b]}.csv"
            if not p.is_file():
                raise FileNotFoundError(p)
            depths[b] = load_depth_map(p)
        return cls(depths)


def boundary_file_stem(b: Boundary) -> str:
    return _BOUNDARY_FILES[b]


# ---------------------------------------------------------------------------
# configuration

WeightMode = "str | float"  # "zero", "depth", or a constant


def _parse_weight_mode(v) -> str | float:
    if isinstance(v, str):
        if v not in ("zero", "depth"):
            raise ConfigError(f"weight mode must be 'zero', 'depth' or a number, got {v!r}")
        return v
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return float(v)
    raise ConfigError(f"weight mode must be 'zero', 'depth' or a number, got {v!r}")


def _parse_size(v, name: str) -> tuple[int, int, int]:
    t = tuple(int(k) for k in v)
    if len(t) != 3 or any(k < 1 for k in t):
        raise ConfigError(f"{name} must be three positive integers, got {v!r}")
    return t


def _parse_weights(v) -> WeightMatrices:
    if isinstance(v, WeightMatrices):
        return v
    if isinstance(v, int):
        try:
            return {7: WeightMatrices.size7, 5: WeightMatrices.size5, 3: WeightMatrices.size3}[v]()
        except KeyError:
            raise ConfigError(f"no built-in weight stencil of side {v}") from None
    try:
        return WeightMatrices.from_w1(np.asarray(v, dtype=np.float64))
    except ValueError as e:
        raise ConfigError(f"bad weight stencil: {e}") from e


def _parse_schedule(v) -> SmoothingSchedule:
    if isinstance(v, SmoothingSchedule):
        return v
    try:
        return SmoothingSchedule(**v)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad smoothing schedule {v!r}: {e}") from e


@dataclass
class RpeParams:
    mean_size: tuple[int, int, int] = (7, 7, 7)
    diff_size: tuple[int, int, int] = (7, 7, 7)
    w1: str | float = "depth"
    w2: str | float = "depth"
    weights: WeightMatrices | int = 7
    schedule: SmoothingSchedule = field(default_factory=SmoothingSchedule)


@dataclass
class IlmParams:
    mean_size: tuple[int, int, int] = (6, 6, 6)
    threshold: float = 30.0
    repetitions: int = 2
    diff_size: tuple[int, int, int] = (1, 1, 11)
    peak_floor: float = 0.0
    erosion_radius: int = 5
    #: pixels subtracted from the eroded-branch depths; None selects the
    #: geometric value radius + round(repetitions / 2): a flat-ball minimum
    #: pushes a dark-to-bright edge down by exactly the radius, and each
    #: even-sized mean pass in the re-run adds half a pixel more
    erosion_compensation: int | None = None
    merge_window: int = 11
    dynamic_weights: WeightMatrices | int = 5
    final_weights: WeightMatrices | int = 3
    schedule: SmoothingSchedule = field(default_factory=SmoothingSchedule)


@dataclass
class IsosParams:
    diff_size: tuple[int, int, int] = (3, 3, 11)
    w1: str | float = "depth"
    w2: str | float = "zero"
    polyfit_enabled: bool = True
    polyfit_confidence: float = 0.98
    weights: WeightMatrices | int = 7
    schedule: SmoothingSchedule = field(default_factory=SmoothingSchedule)


@dataclass
class InnerParams:
    diff_size: tuple[int, int, int] = (7, 15, 15)
    w1: str | float = "depth"
    w2: str | float = "zero"
    inl_opl_orientation: Orientation = Orientation.BRIGHT_BELOW
    weights: WeightMatrices | int = 7
    schedule: SmoothingSchedule = field(default_factory=SmoothingSchedule)


@dataclass
class PipelineConfig:
    """Every tunable of :func:`segment_all`; defaults reproduce the stock run."""

    rpe: RpeParams = field(default_factory=RpeParams)
    ilm: IlmParams = field(default_factory=IlmParams)
    isos: IsosParams = field(default_factory=IsosParams)
    inner: InnerParams = field(default_factory=InnerParams)
    min_contrast: float = 10.0
    threads: int = 1

    def __post_init__(self):
        self.rpe.mean_size = _parse_size(self.rpe.mean_size, "rpe.mean_size")
        self.rpe.diff_size = _parse_size(self.rpe.diff_size, "rpe.diff_size")
        self.ilm.mean_size = _parse_size(self.ilm.mean_size, "ilm.mean_size")
        self.ilm.diff_size = _parse_size(self.ilm.diff_size, "ilm.diff_size")
        self.isos.diff_size = _parse_size(self.isos.diff_size, "isos.diff_size")
        self.inner.diff_size = _parse_size(self.inner.diff_size, "inner.diff_size")
        for stage in (self.rpe, self.isos, self.inner):
            stage.w1 = _parse_weight_mode(stage.w1)
            stage.w2 = _parse_weight_mode(stage.w2)
            stage.weights = _parse_weights(stage.weights)
            stage.schedule = _parse_schedule(stage.schedule)
        self.ilm.dynamic_weights = _parse_weights(self.ilm.dynamic_weights)
        self.ilm.final_weights = _parse_weights(self.ilm.final_weights)
        self.ilm.schedule = _parse_schedule(self.ilm.schedule)
        if isinstance(self.inner.inl_opl_orientation, str):
            self.inner.inl_opl_orientation = Orientation(self.inner.inl_opl_orientation)
        if self.ilm.repetitions < 1:
            raise ConfigError("ilm.repetitions must be >= 1")
        if self.ilm.erosion_radius < 0:
            raise ConfigError("ilm.erosion_radius must be >= 0")
        if self.ilm.merge_window < 1:
            raise ConfigError("ilm.merge_window must be >= 1")
        if not 0 < self.isos.polyfit_confidence < 1:
            raise ConfigError("isos.polyfit_confidence must be in (0, 1)")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    # -- JSON ---------------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        cfg = cls()
        stage_types = {"rpe": RpeParams, "ilm": IlmParams, "isos": IsosParams, "inner": InnerParams}
        for key, val in d.items():
            if key in stage_types:
                stage = getattr(cfg, key)
                if not isinstance(val, dict):
                    raise ConfigError(f"{key} must be an object")
                for k, v in val.items():
                    if not hasattr(stage, k):
                        raise ConfigError(f"unknown config key {key}.{k}")
                    setattr(stage, k, v)
            elif key in ("min_contrast", "threads"):
                setattr(cfg, key, val)
            else:
                raise ConfigError(f"unknown config key {key}")
        cfg.__post_init__()
        return cfg

    @classmethod
    def from_json(cls, path: str | Path) -> "PipelineConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        def weights_repr(w: WeightMatrices):
            for side, maker in ((7, WeightMatrices.size7), (5, WeightMatrices.size5), (3, WeightMatrices.size3)):
                if w.side == side and np.array_equal(w.w1, maker().w1):
                    return side
            return w.w1.tolist()

        def sched_repr(s: SmoothingSchedule):
            return {
                "iterations": s.iterations,
                "dynamic_iterations": s.dynamic_iterations,
                "divisor": s.divisor,
                "final_threshold": s.final_threshold,
            }

        return {
            "rpe": {
                "mean_size": list(self.rpe.mean_size),
                "diff_size": list(self.rpe.diff_size),
                "w1": self.rpe.w1,
                "w2": self.rpe.w2,
                "weights": weights_repr(self.rpe.weights),
                "schedule": sched_repr(self.rpe.schedule),
            },
            "ilm": {
                "mean_size": list(self.ilm.mean_size),
                "threshold": self.ilm.threshold,
                "repetitions": self.ilm.repetitions,
                "diff_size": list(self.ilm.diff_size),
                "peak_floor": self.ilm.peak_floor,
                "erosion_radius": self.ilm.erosion_radius,
                "erosion_compensation": self.ilm.erosion_compensation,
                "merge_window": self.ilm.merge_window,
                "dynamic_weights": weights_repr(self.ilm.dynamic_weights),
                "final_weights": weights_repr(self.ilm.final_weights),
                "schedule": sched_repr(self.ilm.schedule),
            },
            "isos": {
                "diff_size": list(self.isos.diff_size),
                "w1": self.isos.w1,
                "w2": self.isos.w2,
                "polyfit_enabled": self.isos.polyfit_enabled,
                "polyfit_confidence": self.isos.polyfit_confidence,
                "weights": weights_repr(self.isos.weights),
                "schedule": sched_repr(self.isos.schedule),
            },
            "inner": {
                "diff_size": list(self.inner.diff_size),
                "w1": self.inner.w1,
                "w2": self.inner.w2,
                "inl_opl_orientation": self.inner.inl_opl_orientation.value,
                "weights": weights_repr(self.inner.weights),
                "schedule": sched_repr(self.inner.schedule),
            },
            "min_contrast": self.min_contrast,
            "threads": self.threads,
        }

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    # -- validation ---------------------------------------------------------

    def validate_for_volume(self, vol: Volume) -> None:
        """Reject kernels that do not fit the volume, before any work runs."""
        dims = (vol.width, vol.frames, vol.depth)
        checks = [
            ("rpe.mean_size", self.rpe.mean_size),
            ("rpe.diff_size", self.rpe.diff_size),
            ("ilm.mean_size", self.ilm.mean_size),
            ("ilm.diff_size", self.ilm.diff_size),
            ("isos.diff_size", self.isos.diff_size),
            ("inner.diff_size", self.inner.diff_size),
        ]
        for name, size in checks:
            for k, dim, axis in zip(size, dims, "xyz"):
                if k > dim:
                    raise ConfigError(
                        f"{name}: kernel extent {k} exceeds volume {axis} extent {dim}"
                    )
        if self.ilm.merge_window > max(vol.frames, vol.width):
            raise ConfigError("ilm.merge_window exceeds both lateral extents")

    def ilm_erosion_compensation(self) -> int:
        if self.ilm.erosion_compensation is not None:
            return int(self.ilm.erosion_compensation)
        even_mean = self.ilm.mean_size[2] % 2 == 0
        extra = (self.ilm.repetitions + 1) // 2 if even_mean else 0
        return self.ilm.erosion_radius + extra


# ---------------------------------------------------------------------------
# enhancement and extraction

def _weight_profile(mode: str | float, depth: int) -> np.ndarray | None:
    """Per-depth weight vector; None means identically zero."""
    if mode == "zero":
        return None
    if mode == "depth":
        return np.arange(depth, dtype=np.float64)
    return np.full(depth, float(mode))


def enhance(
    diff_vol: np.ndarray,
    smooth_vol: np.ndarray | None,
    w1: str | float = "depth",
    w2: str | float = "zero",
) -> np.ndarray:
    """Combine differential and mean responses: w1(z) * D + w2(z) * S."""
    depth = diff_vol.shape[1]
    v1 = _weight_profile(w1, depth)
    v2 = _weight_profile(w2, depth)
    if v2 is not None and smooth_vol is None:
        raise ValueError("w2 is non-zero but no smoothed volume was given")
    out = np.zeros_like(diff_vol, dtype=np.float64)
    if v1 is not None:
        out += diff_vol
        out *= v1[None, :, None]
    if v2 is not None:
        out += smooth_vol * v2[None, :, None]
    return out


def _fill_from_nearest(depths: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace invalid entries with the nearest valid entry in the same row,
    falling back to the nearest row that had any valid entry."""
    out = depths.astype(np.float64, copy=True)
    frames, width = out.shape
    row_ok = valid.any(axis=1)
    if not row_ok.any():
        out[:] = 0.0
        return out
    cols = np.arange(width)
    for y in np.nonzero(row_ok)[0]:
        if valid[y].all():
            continue
        xs = np.nonzero(valid[y])[0]
        pos = np.searchsorted(xs, cols)
        left = xs[np.clip(pos - 1, 0, xs.size - 1)]
        right = xs[np.clip(pos, 0, xs.size - 1)]
        nearest = np.where(cols - left <= right - cols, left, right)
        bad = ~valid[y]
        out[y, bad] = out[y, nearest[bad]]
    good_rows = np.nonzero(row_ok)[0]
    for y in np.nonzero(~row_ok)[0]:
        src = good_rows[np.argmin(np.abs(good_rows - y))]
        out[y] = out[src]
    return out


def extract_global_max(
    enhanced: np.ndarray,
    above: np.ndarray | None = None,
    below: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Depth of the maximum response per A-scan, ties to the smaller depth.

    ``above``/``below`` (optional per-column depth maps) restrict the search
    to the open interval above < z < below.  A-scans whose interval is
    empty inherit the nearest valid neighbour's depth and come back flagged
    in the second return value (True = had a valid interval).
    """
    frames, depth, width = enhanced.shape
    if above is None and below is None:
        idx = enhanced.argmax(axis=1)
        return idx.astype(np.float64), np.ones((frames, width), dtype=bool)
    z = np.arange(depth).reshape(1, depth, 1)
    ok = np.ones(enhanced.shape, dtype=bool)
    if above is not None:
        ok &= z > np.asarray(above)[:, None, :]
    if below is not None:
        ok &= z < np.asarray(below)[:, None, :]
    valid = ok.any(axis=1)
    masked = np.where(ok, enhanced, -np.inf)
    idx = masked.argmax(axis=1).astype(np.float64)
    if not valid.all():
        idx = _fill_from_nearest(idx, valid)
    return idx, valid


def extract_first_peak(
    enhanced: np.ndarray,
    direction: str = "top_down",
    floor: float = 0.0,
) -> np.ndarray:
    """First strict local maximum along depth per A-scan, above ``floor``.

    A peak must exceed both axial neighbours (one-sided at the volume
    faces).  ``direction`` walks from the top (small z) or the bottom.
    A-scans with no qualifying peak fall back to the global maximum.
    """
    if direction not in ("top_down", "bottom_up"):
        raise ValueError(f"direction must be 'top_down' or 'bottom_up', got {direction!r}")
    v = enhanced
    frames, depth, width = v.shape
    peak = np.empty(v.shape, dtype=bool)
    peak[:, 0, :] = True
    peak[:, 1:, :] = v[:, 1:, :] > v[:, :-1, :]
    trailing = np.empty(v.shape, dtype=bool)
    trailing[:, -1, :] = True
    trailing[:, :-1, :] = v[:, :-1, :] > v[:, 1:, :]
    peak &= trailing
    peak &= v > floor
    has_peak = peak.any(axis=1)
    if direction == "top_down":
        idx = peak.argmax(axis=1)
    else:
        idx = depth - 1 - peak[:, ::-1, :].argmax(axis=1)
    fallback = v.argmax(axis=1)
    return np.where(has_peak, idx, fallback).astype(np.float64)


# ---------------------------------------------------------------------------
# stages

@dataclass
class StageReport:
    """Bookkeeping from one stage: wall time and anything that was flagged."""

    name: str
    seconds: float = 0.0
    smoothing_iterations: int = 0
    flagged_columns: int = 0
    degraded_rows: int = 0
    low_confidence: bool = False
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "seconds": round(self.seconds, 4),
            "smoothing_iterations": self.smoothing_iterations,
            "flagged_columns": self.flagged_columns,
        }
        if self.degraded_rows:
            d["degraded_rows"] = self.degraded_rows
        if self.low_confidence:
            d["low_confidence"] = True
        d.update(self.details)
        return d


def _two_phase_smooth(
    depths: np.ndarray,
    dynamic_wm: WeightMatrices,
    final_wm: WeightMatrices,
    sched: SmoothingSchedule,
) -> tuple[np.ndarray, int]:
    """Dynamic-threshold iterations with one stencil, fixed-threshold tail with another."""
    total = 0
    out = depths
    if sched.dynamic_iterations > 0:
        phase1 = SmoothingSchedule(
            iterations=sched.dynamic_iterations,
            dynamic_iterations=sched.dynamic_iterations,
            divisor=sched.divisor,
            final_threshold=sched.final_threshold,
        )
        out, used = smooth_depth_map(out, dynamic_wm.w1, dynamic_wm.w2, phase1)
        total += used
    tail = sched.iterations - sched.dynamic_iterations
    if tail > 0:
        phase2 = SmoothingSchedule(
            iterations=tail,
            dynamic_iterations=0,
            divisor=sched.divisor,
            final_threshold=sched.final_threshold,
        )
        out, used = smooth_depth_map(out, final_wm.w1, final_wm.w2, phase2)
        total += used
    return out, total


def segment_rpe(vol: Volume, cfg: PipelineConfig) -> tuple[np.ndarray, StageReport]:
    """RPE-choroid surface on the raw (unflattened) volume.

    The brightest band sits just above this boundary, so the enhanced
    response w1(z) * D + w2(z) * S peaks at the bottom edge of that band;
    depth-proportional weights bias the maximum toward the deeper of any
    competing bright bands.
    """
    t0 = time.perf_counter()
    report = StageReport(name="rpe")
    v = vol.voxels
    contrast = float(v.max()) - float(v.min())
    if contrast < cfg.min_contrast:
        report.low_confidence = True
    s = mean_filter(v, cfg.rpe.mean_size)
    d = diff_filter(v, cfg.rpe.diff_size, DEFAULT_ORIENTATION[Boundary.RPE_CHOROID])
    i_vol = enhance(d, s, cfg.rpe.w1, cfg.rpe.w2)
    del d, s
    raw, _ = extract_global_max(i_vol)
    del i_vol
    wm = cfg.rpe.weights
    out, iters = smooth_depth_map(raw, wm.w1, wm.w2, cfg.rpe.schedule)
    report.smoothing_iterations = iters
    report.seconds = time.perf_counter() - t0
    return out, report


@dataclass
class IlmParts:
    """Intermediates of the ILM stage, kept for diagnostics and tests."""

    bss: np.ndarray  # smoothed result of the plain branch
    pbss: np.ndarray  # eroded branch after depth compensation (unsmoothed)
    merged: np.ndarray


def _ilm_denoise(v: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    s = v
    for _ in range(cfg.ilm.repetitions):
        s = mean_filter(s, cfg.ilm.mean_size)
        s = threshold_zero(s, cfg.ilm.threshold)
    return s


def segment_ilm(
    flat: np.ndarray, cfg: PipelineConfig
) -> tuple[np.ndarray, StageReport, IlmParts]:
    """Vitreous-ILM surface on the flattened, below-RPE-masked volume.

    Two candidate maps are built: a plain denoise+differential branch, and
    a branch that first erodes the denoised volume with a ball so that
    small bright clutter in the vitreous cannot host a peak.  The merge
    keeps the eroded branch where it is locally consistent and falls back
    to the plain branch elsewhere, then the result is smoothed again.
    """
    t0 = time.perf_counter()
    report = StageReport(name="ilm")
    orientation = DEFAULT_ORIENTATION[Boundary.VITREOUS_ILM]

    s = _ilm_denoise(flat, cfg)
    d = diff_filter(s, cfg.ilm.diff_size, orientation)
    raw_bss = extract_first_peak(d, "top_down", cfg.ilm.peak_floor)
    del d
    bss, it1 = _two_phase_smooth(
        raw_bss, cfg.ilm.dynamic_weights, cfg.ilm.final_weights, cfg.ilm.schedule
    )

    eroded = erode_ball(s, cfg.ilm.erosion_radius)
    del s
    s2 = _ilm_denoise(eroded, cfg)
    del eroded
    d2 = diff_filter(s2, cfg.ilm.diff_size, orientation)
    del s2
    raw_pbss = extract_first_peak(d2, "top_down", cfg.ilm.peak_floor)
    del d2
    pbss = raw_pbss - cfg.ilm_erosion_compensation()

    merged = merge_depth_maps(pbss, bss, cfg.ilm.merge_window)
    report.details["pbss_chosen"] = int(np.sum(merged == pbss) - np.sum(pbss == bss))
    out, it2 = _two_phase_smooth(
        merged, cfg.ilm.dynamic_weights, cfg.ilm.final_weights, cfg.ilm.schedule
    )
    np.clip(out, 0, flat.shape[1] - 1, out=out)
    report.smoothing_iterations = it1 + it2
    report.seconds = time.perf_counter() - t0
    return out, report, IlmParts(bss=bss, pbss=pbss, merged=merged)


def segment_isos(
    flat: np.ndarray,
    ilm: np.ndarray,
    rpe: np.ndarray,
    cfg: PipelineConfig,
) -> tuple[np.ndarray, StageReport]:
    """ONL-IS/OS surface between the ILM and the RPE (flattened coordinates).

    The volume is masked to kill competing edges (255 above the ILM, 0
    below the RPE), the response is restricted to the open corridor, and a
    per-frame cubic outlier rejection repairs columns where focal darkening
    (vessel shadows, drusen-like spots) broke the maximum.
    """
    t0 = time.perf_counter()
    report = StageReport(name="isos")
    frames, depth, width = flat.shape
    ilm = np.asarray(ilm, dtype=np.float64)
    rpe = np.asarray(rpe, dtype=np.float64)

    masked = flat.copy()
    z = np.arange(depth).reshape(1, depth, 1)
    masked[z < ilm[:, None, :]] = 255
    masked[z > rpe[:, None, :]] = 0
    d = diff_filter(masked, cfg.isos.diff_size, DEFAULT_ORIENTATION[Boundary.ONL_ISOS])
    del masked
    i_vol = enhance(d, None, cfg.isos.w1, cfg.isos.w2)
    del d
    raw, valid = extract_global_max(i_vol, above=ilm, below=rpe)
    del i_vol
    report.flagged_columns = int((~valid).sum())

    if cfg.isos.polyfit_enabled:
        for y in range(frames):
            res = poly3_reject(raw[y], confidence=cfg.isos.polyfit_confidence)
            raw[y] = res.depths
            if res.degraded:
                report.degraded_rows += 1

    wm = cfg.isos.weights
    out, iters = smooth_depth_map(raw, wm.w1, wm.w2, cfg.isos.schedule)
    np.clip(out, 0, depth - 1, out=out)
    report.smoothing_iterations = iters
    report.seconds = time.perf_counter() - t0
    return out, report


def segment_inner(
    flat: np.ndarray,
    above: np.ndarray,
    below: np.ndarray,
    boundary: Boundary,
    cfg: PipelineConfig,
) -> tuple[np.ndarray, StageReport]:
    """One inner boundary inside the corridor (above, below), flattened coords."""
    t0 = time.perf_counter()
    if boundary in (Boundary.VITREOUS_ILM, Boundary.ONL_ISOS, Boundary.RPE_CHOROID):
        raise ValueError(f"{boundary.value} has a dedicated stage")
    report = StageReport(name=boundary.value)
    frames, depth, width = flat.shape
    above = np.asarray(above, dtype=np.float64)
    below = np.asarray(below, dtype=np.float64)
    if np.any(above > below):
        raise ValueError(f"{boundary.value}: corridor is inverted at some A-scans")

    if boundary is Boundary.INL_OPL:
        orientation = cfg.inner.inl_opl_orientation
    else:
        orientation = DEFAULT_ORIENTATION[boundary]

    # Wall values are picked so both artificial corridor edges repel the
    # target orientation; bright-below uses the IS/OS convention (255 above,
    # 0 below) and bright-above mirrors it.  Either wall also erases the
    # in-corridor shoulder of the neighbouring boundary's own step response,
    # which would otherwise out-score a weaker target edge.
    hi, lo = (255, 0) if orientation is Orientation.BRIGHT_BELOW else (0, 255)
    masked = flat.copy()
    z = np.arange(depth).reshape(1, depth, 1)
    masked[z < above[:, None, :]] = hi
    masked[z > below[:, None, :]] = lo
    d = diff_filter(masked, cfg.inner.diff_size, orientation)
    del masked
    i_vol = enhance(d, None, cfg.inner.w1, cfg.inner.w2)
    del d
    raw, valid = extract_global_max(i_vol, above=above, below=below)
    del i_vol
    report.flagged_columns = int((~valid).sum())

    wm = cfg.inner.weights
    out, iters = smooth_depth_map(raw, wm.w1, wm.w2, cfg.inner.schedule)
    np.clip(out, 0, depth - 1, out=out)
    report.smoothing_iterations = iters
    report.seconds = time.perf_counter() - t0
    return out, report


# ---------------------------------------------------------------------------
# whole-volume driver

@dataclass
class SegmentationResult:
    boundaries: BoundarySet
    offsets: FlattenOffsets
    reports: list[StageReport]
    clamped_columns: int
    total_seconds: float
    frames: int

    def quality_summary(self) -> dict:
        return {
            "stages": {r.name: r.to_dict() for r in self.reports},
            "clamped_columns": self.clamped_columns,
            "ordering_violations": self.boundaries.ordering_violations(),
            "total_seconds": round(self.total_seconds, 4),
            "seconds_per_frame": round(self.total_seconds / self.frames, 4),
            "reference_depth": self.offsets.reference_depth,
        }


def segment_all(vol: Volume, cfg: PipelineConfig | None = None) -> SegmentationResult:
    """Run the full seven-boundary pipeline on one volume.

    Stage order: RPE on the raw volume; flatten to the deepest RPE depth;
    ILM, then IS/OS between ILM and RPE; then the four inner boundaries,
    each inside the corridor left by its already-found neighbours
    (OPL-ONL first, then NFL-GCL, IPL-INL, INL-OPL); finally everything is
    mapped back to original coordinates and clamped into anatomical order.
    """
    cfg = cfg or PipelineConfig()
    cfg.validate_for_volume(vol)
    t0 = time.perf_counter()
    reports: list[StageReport] = []

    rpe, rep = segment_rpe(vol, cfg)
    reports.append(rep)

    t_flat = time.perf_counter()
    flat_vol, offsets = flatten_volume(vol, rpe)
    reference = offsets.reference_depth
    flat = flat_vol.voxels.copy()
    flat[:, reference + 1 :, :] = 0  # choroid is irrelevant from here on
    depth = vol.depth
    reports.append(StageReport(name="flatten", seconds=time.perf_counter() - t_flat))

    ilm, rep, _parts = segment_ilm(flat, cfg)
    reports.append(rep)
    rpe_flat = np.full(ilm.shape, float(reference))
    np.clip(ilm, 0, reference, out=ilm)

    isos, rep = segment_isos(flat, ilm, rpe_flat, cfg)
    reports.append(rep)
    np.clip(isos, ilm, rpe_flat, out=isos)

    opl, rep = segment_inner(flat, ilm, isos, Boundary.OPL_ONL, cfg)
    reports.append(rep)
    np.clip(opl, ilm, isos, out=opl)

    nfl, rep = segment_inner(flat, ilm, opl, Boundary.NFL_GCL, cfg)
    reports.append(rep)
    np.clip(nfl, ilm, opl, out=nfl)

    ipl, rep = segment_inner(flat, nfl, opl, Boundary.IPL_INL, cfg)
    reports.append(rep)
    np.clip(ipl, nfl, opl, out=ipl)

    inl, rep = segment_inner(flat, ipl, opl, Boundary.INL_OPL, cfg)
    reports.append(rep)
    np.clip(inl, ipl, opl, out=inl)

    in_flat = {
        Boundary.VITREOUS_ILM: ilm,
        Boundary.NFL_GCL: nfl,
        Boundary.IPL_INL: ipl,
        Boundary.INL_OPL: inl,
        Boundary.OPL_ONL: opl,
        Boundary.ONL_ISOS: isos,
    }
    depths = {b: unflatten_depths(m, offsets) for b, m in in_flat.items()}
    depths[Boundary.RPE_CHOROID] = np.asarray(rpe, dtype=np.float64)

    # Enforce anatomical order: push each surface below its upper neighbour,
    # then pull everything above the RPE anchor.
    clamped = np.zeros(ilm.shape, dtype=bool)
    seq = [depths[b] for b in ANATOMICAL_ORDER]
    for i in range(1, len(seq) - 1):
        crossed = seq[i] < seq[i - 1]
        clamped |= crossed
        seq[i] = np.maximum(seq[i], seq[i - 1])
    for i in range(len(seq) - 2, -1, -1):
        crossed = seq[i] > seq[i + 1]
        clamped |= crossed
        seq[i] = np.minimum(seq[i], seq[i + 1])
    for b, m in zip(ANATOMICAL_ORDER, seq):
        depths[b] = np.clip(m, 0, depth - 1)

    boundaries = BoundarySet(depths)
    total = time.perf_counter() - t0
    return SegmentationResult(
        boundaries=boundaries,
        offsets=offsets,
        reports=reports,
        clamped_columns=int(clamped.sum()),
        total_seconds=total,
        frames=vol.frames,
    )


def thickness_map(
    boundaries: BoundarySet,
    top: Boundary,
    bottom: Boundary,
    axial_um_per_px: float = 1.0,
) -> np.ndarray:
    """Per-A-scan distance from ``top`` down to ``bottom`` in micrometres."""
    order = {b: i for i, b in enumerate(ANATOMICAL_ORDER)}
    if order[top] >= order[bottom]:
        raise ValueError(f"{top.value} is not above {bottom.value}")
    return (boundaries[bottom] - boundaries[top]) * axial_um_per_px
