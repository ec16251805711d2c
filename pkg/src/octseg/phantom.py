"""Synthetic retina volumes with exact ground truth, and error reporting.

The generator paints eight intensity bands between seven smooth surfaces,
then layers on the image phenomena the segmenter has to survive: speckle,
vessel shadows, and bright clutter floating in the vitreous.  The painted
surfaces come back as ground truth, so evaluation against a phantom is
exact by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from octseg.pipeline import ANATOMICAL_ORDER, Boundary, BoundarySet
from octseg.volume import Volume, VolumeMeta

#: band order, top of the scan to the bottom
BAND_NAMES = (
    "vitreous",
    "nfl",
    "gcl_ipl",
    "inl",
    "opl",
    "onl",
    "isos_rpe",
    "choroid",
)

#: default mean intensities; the retina is brightest at the NFL and the
#: IS/OS+RPE complex, darkest at the ONL, and the NFL-GCL drop is kept
#: larger than the IPL-INL drop so depth-weighted enhancement cannot
#: prefer the deeper of the two
DEFAULT_BANDS = (5, 160, 100, 65, 120, 40, 170, 60)


@dataclass
class SurfaceSpec:
    """One boundary surface: base depth, smooth undulation, optional pit."""

    base: float
    amplitude: float = 6.0
    wavelength: float = 300.0
    fovea_depth: float = 0.0
    fovea_width: float = 55.0

    def __post_init__(self):
        if self.base <= 0:
            raise ValueError("base depth must be positive")
        if self.amplitude < 0 or self.fovea_depth < 0:
            raise ValueError("amplitudes must be >= 0")
        if self.wavelength <= 0 or self.fovea_width <= 0:
            raise ValueError("wavelength and fovea_width must be positive")


def _default_surfaces() -> dict[Boundary, SurfaceSpec]:
    bases = {
        Boundary.VITREOUS_ILM: 150.0,
        Boundary.NFL_GCL: 175.0,
        Boundary.IPL_INL: 225.0,
        Boundary.INL_OPL: 239.0,
        Boundary.OPL_ONL: 254.0,
        Boundary.ONL_ISOS: 304.0,
        Boundary.RPE_CHOROID: 330.0,
    }
    # the pit deepens the inner surfaces most and leaves the RPE alone
    dips = {
        Boundary.VITREOUS_ILM: 15.0,
        Boundary.NFL_GCL: 11.0,
        Boundary.IPL_INL: 7.0,
        Boundary.INL_OPL: 5.5,
        Boundary.OPL_ONL: 4.0,
        Boundary.ONL_ISOS: 1.5,
        Boundary.RPE_CHOROID: 0.0,
    }
    return {
        b: SurfaceSpec(base=bases[b], fovea_depth=dips[b]) for b in ANATOMICAL_ORDER
    }


@dataclass
class PhantomSpec:
    """Everything that determines a phantom volume, including the seed."""

    width: int = 512
    frames: int = 97
    depth: int = 496
    surfaces: dict[Boundary, SurfaceSpec] = field(default_factory=_default_surfaces)
    band_intensities: tuple[int, ...] = DEFAULT_BANDS
    speckle_sigma: float = 0.0
    shadow_count: int = 0
    shadow_width: int = 8
    shadow_attenuation: float = 0.6
    blob_count: int = 0
    blob_intensity: int = 150
    seed: int = 0

    def __post_init__(self):
        if min(self.width, self.frames, self.depth) < 1:
            raise ValueError("all dimensions must be >= 1")
        missing = [b for b in ANATOMICAL_ORDER if b not in self.surfaces]
        if missing:
            raise ValueError(f"missing surfaces: {[b.value for b in missing]}")
        self.band_intensities = tuple(int(v) for v in self.band_intensities)
        if len(self.band_intensities) != len(BAND_NAMES):
            raise ValueError(f"need {len(BAND_NAMES)} band intensities")
        if any(not 0 <= v <= 255 for v in self.band_intensities):
            raise ValueError("band intensities must lie in [0, 255]")
        if self.speckle_sigma < 0:
            raise ValueError("speckle_sigma must be >= 0")
        if not 0 < self.shadow_attenuation <= 1:
            raise ValueError("shadow_attenuation must be in (0, 1]")
        if self.shadow_count < 0 or self.blob_count < 0:
            raise ValueError("counts must be >= 0")
        if self.shadow_count and self.shadow_width < 1:
            raise ValueError("shadow_width must be >= 1")
        if not 0 <= self.blob_intensity <= 255:
            raise ValueError("blob_intensity must lie in [0, 255]")

    # -- JSON ---------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "frames": self.frames,
            "depth": self.depth,
            "surfaces": {
                b.value: {
                    "base": s.base,
                    "amplitude": s.amplitude,
                    "wavelength": s.wavelength,
                    "fovea_depth": s.fovea_depth,
                    "fovea_width": s.fovea_width,
                }
                for b, s in self.surfaces.items()
            },
            "band_intensities": list(self.band_intensities),
            "speckle_sigma": self.speckle_sigma,
            "shadow_count": self.shadow_count,
            "shadow_width": self.shadow_width,
            "shadow_attenuation": self.shadow_attenuation,
            "blob_count": self.blob_count,
            "blob_intensity": self.blob_intensity,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        if not isinstance(d, dict):
            raise ValueError("phantom spec must be a JSON object")
        kwargs = dict(d)
        raw_surfaces = kwargs.pop("surfaces", None)
        spec = cls()  # defaults
        if raw_surfaces is not None:
            surfaces = dict(spec.surfaces)
            for name, sd in raw_surfaces.items():
                b = Boundary(name)
                surfaces[b] = SurfaceSpec(**sd)
            kwargs["surfaces"] = surfaces
        known = set(cls().__dict__)
        unknown = set(kwargs) - known
        if unknown:
            raise ValueError(f"unknown phantom spec keys: {sorted(unknown)}")
        merged = {**{k: v for k, v in spec.__dict__.items()}, **kwargs}
        return cls(**merged)

    @classmethod
    def from_json(cls, path: str | Path) -> "PhantomSpec":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(d)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _surface_grids(spec: PhantomSpec, rng: np.random.Generator) -> dict[Boundary, np.ndarray]:
    x = np.arange(spec.width, dtype=np.float64)
    y = np.arange(spec.frames, dtype=np.float64)
    # one undulation phase pair for the whole stack keeps equal-amplitude
    # surfaces parallel, so layer thicknesses stay at their design gaps
    phase_x, phase_y = rng.uniform(0.0, 2.0 * math.pi, size=2)
    cx, cy = (spec.width - 1) / 2.0, (spec.frames - 1) / 2.0
    out = {}
    for b in ANATOMICAL_ORDER:
        s = spec.surfaces[b]
        und = s.amplitude * (
            np.sin(2.0 * math.pi * x / s.wavelength + phase_x)[None, :]
            + np.sin(2.0 * math.pi * y / s.wavelength + phase_y)[:, None]
        )
        pit = s.fovea_depth * np.exp(
            -(((x - cx) ** 2)[None, :] + ((y - cy) ** 2)[:, None])
            / (2.0 * s.fovea_width**2)
        )
        out[b] = s.base + und + pit
    return out


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, BoundarySet]:
    """Deterministically build one volume and its exact truth surfaces."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    grids = _surface_grids(spec, rng)
    cuts = {b: np.rint(grids[b]).astype(np.int64) for b in ANATOMICAL_ORDER}

    for upper, lower in zip(ANATOMICAL_ORDER, ANATOMICAL_ORDER[1:]):
        if np.any(cuts[upper] > cuts[lower]):
            raise ValueError(f"surfaces cross: {upper.value} below {lower.value}")
    if cuts[Boundary.VITREOUS_ILM].min() < 1:
        raise ValueError("no room above the inner surface")
    if cuts[Boundary.RPE_CHOROID].max() > spec.depth - 1:
        raise ValueError("bands exceed depth")

    bands = spec.band_intensities
    vol = np.full((spec.frames, spec.depth, spec.width), bands[0], dtype=np.uint8)
    z3 = np.arange(spec.depth).reshape(1, -1, 1)
    for value, b in zip(bands[1:], ANATOMICAL_ORDER):
        vol[z3 >= cuts[b][:, None, :]] = value

    if spec.shadow_count:
        vol = _stamp_shadows(vol, spec, cuts[Boundary.VITREOUS_ILM], rng)
    if spec.blob_count:
        _stamp_blobs(vol, spec, cuts[Boundary.VITREOUS_ILM], rng)
    if spec.speckle_sigma > 0:
        eta = rng.standard_normal(size=vol.shape, dtype=np.float32)
        noisy = vol.astype(np.float32)
        noisy *= 1.0 + spec.speckle_sigma * eta
        del eta
        np.clip(np.rint(noisy, out=noisy), 0.0, 255.0, out=noisy)
        vol = noisy.astype(np.uint8)

    truth = BoundarySet({b: cuts[b].astype(np.float64) for b in ANATOMICAL_ORDER})
    return Volume(voxels=vol), truth


def _shadow_starts(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Non-overlapping shadow x-origins: one per equal slice of the width."""
    w, n, sw = spec.width, spec.shadow_count, spec.shadow_width
    slot = w // n
    if slot < sw:
        raise ValueError("shadows do not fit the volume width without overlap")
    offsets = rng.integers(0, slot - sw + 1, size=n)
    return np.arange(n) * slot + offsets


def _stamp_shadows(
    vol: np.ndarray,
    spec: PhantomSpec,
    ilm: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Darken full-depth column bands from the inner surface down, like the
    shadow a retinal vessel casts on everything beneath it."""
    starts = _shadow_starts(spec, rng)
    z3 = np.arange(vol.shape[1]).reshape(1, -1, 1)
    for x0 in starts:
        cols = slice(int(x0), int(x0) + spec.shadow_width)
        region = vol[:, :, cols].astype(np.float32)
        below = z3 >= ilm[:, None, cols]
        region[below] = np.rint(region[below] * spec.shadow_attenuation)
        vol[:, :, cols] = region.astype(np.uint8)
    return vol


def _stamp_blobs(
    vol: np.ndarray,
    spec: PhantomSpec,
    ilm: np.ndarray,
    rng: np.random.Generator,
) -> None:
    """Bright clutter floating in the vitreous, well above the inner surface.

    Radii stay at 4 or less so a ball erosion of radius 5 removes every
    blob outright; this is the clutter the eroded ILM branch exists for.
    """
    frames, depth, width = vol.shape
    top_limit = int(ilm.min())
    for _ in range(spec.blob_count):
        r = int(rng.integers(2, 5))
        zlo, zhi = 4 + r, top_limit - r - 6
        if zhi <= zlo or width <= 2 * r or frames < 1:
            continue  # volume too cramped for this blob; keep the rng stream aligned
        xc = int(rng.integers(r, width - r))
        yc = int(rng.integers(0, frames))
        zc = int(rng.integers(zlo, zhi))
        dy = np.arange(max(0, yc - r), min(frames, yc + r + 1)) - yc
        dz = np.arange(zc - r, zc + r + 1) - zc
        dx = np.arange(xc - r, xc + r + 1) - xc
        ball = (
            dy[:, None, None] ** 2 + dz[None, :, None] ** 2 + dx[None, None, :] ** 2
        ) <= r * r
        patch = vol[
            yc + dy[0] : yc + dy[-1] + 1,
            zc - r : zc + r + 1,
            xc - r : xc + r + 1,
        ]
        patch[ball] = spec.blob_intensity


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class BoundaryError:
    """Absolute and signed error statistics for one surface, in pixels."""

    mae_px: float
    mae_sd_px: float
    signed_px: float
    signed_sd_px: float

    def scaled(self, um_per_px: float) -> tuple[float, float, float, float]:
        return (
            self.mae_px * um_per_px,
            self.mae_sd_px * um_per_px,
            self.signed_px * um_per_px,
            self.signed_sd_px * um_per_px,
        )


def _boundary_error(diff: np.ndarray) -> BoundaryError:
    ab = np.abs(diff)
    return BoundaryError(
        mae_px=float(ab.mean()),
        mae_sd_px=float(ab.std()),
        signed_px=float(diff.mean()),
        signed_sd_px=float(diff.std()),
    )


@dataclass
class ErrorReport:
    """Per-boundary and pooled error statistics against ground truth."""

    per_boundary: dict[Boundary, BoundaryError]
    overall: BoundaryError
    axial_um_per_px: float

    def rows(self) -> list[tuple]:
        out = []
        for b in ANATOMICAL_ORDER:
            e = self.per_boundary[b]
            um = e.scaled(self.axial_um_per_px)
            out.append((b.value, e.mae_px, e.mae_sd_px, e.signed_px, e.signed_sd_px, *um))
        e = self.overall
        um = e.scaled(self.axial_um_per_px)
        out.append(("overall", e.mae_px, e.mae_sd_px, e.signed_px, e.signed_sd_px, *um))
        return out

    def format_table(self) -> str:
        head = (
            f"{'boundary':<14} {'abs px':>8} {'sd':>7} {'signed px':>10} {'sd':>7}"
            f" {'abs um':>8} {'sd':>7} {'signed um':>10} {'sd':>7}"
        )
        lines = [head, "-" * len(head)]
        for name, a, asd, s, ssd, au, ausd, su, susd in self.rows():
            lines.append(
                f"{name:<14} {a:>8.3f} {asd:>7.3f} {s:>+10.3f} {ssd:>7.3f}"
                f" {au:>8.2f} {ausd:>7.2f} {su:>+10.2f} {susd:>7.2f}"
            )
        return "\n".join(lines)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        header = (
            "boundary,abs_px,abs_sd_px,signed_px,signed_sd_px,"
            "abs_um,abs_sd_um,signed_um,signed_sd_um"
        )
        body = "\n".join(
            ",".join([r[0]] + [repr(v) for v in r[1:]]) for r in self.rows()
        )
        path.write_text(header + "\n" + body + "\n")
        return path


def evaluate(
    result: BoundarySet, truth: BoundarySet, meta: VolumeMeta | None = None
) -> ErrorReport:
    """Signed error is result minus truth; overall row pools every boundary."""
    if result.shape != truth.shape:
        raise ValueError(f"shape mismatch: {result.shape} vs {truth.shape}")
    scale = meta.axial_um_per_px if meta is not None else 1.0
    per = {}
    diffs = []
    for b in ANATOMICAL_ORDER:
        diff = np.asarray(result[b], dtype=np.float64) - np.asarray(truth[b], dtype=np.float64)
        per[b] = _boundary_error(diff)
        diffs.append(diff.ravel())
    overall = _boundary_error(np.concatenate(diffs))
    return ErrorReport(per_boundary=per, overall=overall, axial_um_per_px=scale)


#: the six tissue layers between consecutive boundaries
LAYERS = (
    ("nfl", Boundary.VITREOUS_ILM, Boundary.NFL_GCL),
    ("gcl_ipl", Boundary.NFL_GCL, Boundary.IPL_INL),
    ("inl", Boundary.IPL_INL, Boundary.INL_OPL),
    ("opl", Boundary.INL_OPL, Boundary.OPL_ONL),
    ("onl", Boundary.OPL_ONL, Boundary.ONL_ISOS),
    ("rpe", Boundary.ONL_ISOS, Boundary.RPE_CHOROID),
)


@dataclass
class LayerThickness:
    layer: str
    mean_um: float
    sd_um: float
    mean_px: float


def layer_thickness_report(
    boundaries: BoundarySet, meta: VolumeMeta | None = None
) -> list[LayerThickness]:
    """Mean thickness of each tissue layer over all A-scans, in micrometres."""
    scale = meta.axial_um_per_px if meta is not None else 1.0
    out = []
    for name, top, bottom in LAYERS:
        gap = np.asarray(boundaries[bottom], dtype=np.float64) - np.asarray(
            boundaries[top], dtype=np.float64
        )
        if np.any(gap < 0):
            raise ValueError(f"layer {name}: boundaries out of order")
        out.append(
            LayerThickness(
                layer=name,
                mean_um=float(gap.mean()) * scale,
                sd_um=float(gap.std()) * scale,
                mean_px=float(gap.mean()),
            )
        )
    return out
