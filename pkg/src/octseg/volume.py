"""Voxel container, disk formats and axial flattening.

Coordinate convention used throughout the package: ``x`` indexes A-scan
columns (image width), ``y`` indexes B-scan frames, ``z`` indexes depth and
increases toward the choroid.  In memory a volume is a C-ordered
``(frames, depth, width)`` uint8 array, so ``voxels[y]`` is one B-scan
image and the raw on-disk order is x-fastest, then z, then y.

Depth maps (one surface depth per A-scan) are ``(frames, width)`` float
arrays; on disk they are header-less CSV with one row per B-scan frame, or
16-bit PGM for integer viewing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RAW_ORDER = "x-fastest, then z, then y"


class VolumeFormatError(ValueError):
    """A volume, sidecar or depth-map file does not match its declared format."""


@dataclass
class VolumeMeta:
    """Acquisition metadata that is not derivable from the voxels.

    ``axial_um_per_px`` converts depth differences to micrometres.  There is
    no physical default; 1.0 simply makes micrometre columns equal pixel
    columns until the caller supplies the scanner's real scale.
    """

    axial_um_per_px: float = 1.0
    source: str = ""

    def __post_init__(self):
        if not self.axial_um_per_px > 0:
            raise ValueError(f"axial_um_per_px must be positive, got {self.axial_um_per_px}")


@dataclass
class Volume:
    """An 8-bit OCT volume stored as a (frames, depth, width) array."""

    voxels: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3:
            raise ValueError(f"expected a 3D (frames, depth, width) array, got shape {v.shape}")
        if v.dtype != np.uint8:
            raise ValueError(f"volumes are 8-bit; got dtype {v.dtype}")
        self.voxels = v

    @property
    def frames(self) -> int:
        return self.voxels.shape[0]

    @property
    def depth(self) -> int:
        return self.voxels.shape[1]

    @property
    def width(self) -> int:
        return self.voxels.shape[2]

    def voxel(self, x: int, y: int, z: int) -> int:
        """Intensity at A-scan column x, frame y, depth z."""
        return int(self.voxels[y, z, x])


@dataclass
class FlattenOffsets:
    """Per-A-scan downward shifts applied by :func:`flatten_volume`."""

    offsets: np.ndarray  # (frames, width) int, all >= 0
    reference_depth: int


# ---------------------------------------------------------------------------
# raw + sidecar format

def _sidecar_path(raw_path: Path) -> Path:
    return raw_path.with_suffix(".json")


def save_volume(vol: Volume, base: str | Path) -> tuple[Path, Path]:
    """Write ``<base>.raw`` plus ``<base>.json`` sidecar; returns both paths.

    The raw file is the voxel array in C order (x fastest, then z, then y),
    one unsigned byte per voxel, little-endian by construction.
    """
    base = Path(base)
    raw_path = base.with_suffix(".raw")
    meta_path = _sidecar_path(raw_path)
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    vol.voxels.tofile(raw_path)
    meta = {
        "width": vol.width,
        "frames": vol.frames,
        "depth": vol.depth,
        "order": RAW_ORDER,
    }
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    return raw_path, meta_path


def _load_raw(path: Path) -> Volume:
    if path.suffix == ".json":
        meta_path, raw_path = path, path.with_suffix(".raw")
    else:
        raw_path, meta_path = path, _sidecar_path(path)
    if not raw_path.is_file():
        raise FileNotFoundError(raw_path)
    if not meta_path.is_file():
        raise VolumeFormatError(f"missing sidecar {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"unreadable sidecar {meta_path}: {e}") from e
    try:
        width, frames, depth = int(meta["width"]), int(meta["frames"]), int(meta["depth"])
    except KeyError as e:
        raise VolumeFormatError(f"sidecar {meta_path} lacks key {e}") from e
    order = meta.get("order", RAW_ORDER)
    if order.replace(" ", "") != RAW_ORDER.replace(" ", ""):
        raise VolumeFormatError(f"unsupported voxel order {order!r}")
    if min(width, frames, depth) <= 0:
        raise VolumeFormatError(f"non-positive dimensions in {meta_path}")
    data = np.fromfile(raw_path, dtype=np.uint8)
    expected = width * frames * depth
    if data.size != expected:
        raise VolumeFormatError(
            f"{raw_path}: {data.size} bytes, sidecar implies {expected}"
        )
    return Volume(data.reshape(frames, depth, width))


# ---------------------------------------------------------------------------
# PGM (one B-scan per file, lexicographic frame order)

def _read_pgm(path: Path) -> np.ndarray:
    """Read a binary (P5) PGM; returns (rows, cols) uint8 or uint16."""
    blob = path.read_bytes()
    if blob[:2] != b"P5":
        raise VolumeFormatError(f"{path}: not a binary PGM (P5)")
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # '#' comments allowed, then exactly one whitespace byte before the data.
    tokens: list[int] = []
    i = 2
    while len(tokens) < 3:
        if i >= len(blob):
            raise VolumeFormatError(f"{path}: truncated PGM header")
        c = blob[i : i + 1]
        if c == b"#":
            i = blob.index(b"\n", i) + 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(blob) and not blob[j : j + 1].isspace():
                j += 1
            tokens.append(int(blob[i:j]))
            i = j
    i += 1  # exactly one whitespace byte after maxval
    cols, rows, maxval = tokens
    if maxval <= 0 or maxval > 65535:
        raise VolumeFormatError(f"{path}: bad maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = rows * cols
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=i)
    if data.size != count:
        raise VolumeFormatError(f"{path}: expected {count} samples")
    arr = data.reshape(rows, cols)
    return arr.astype(np.uint16) if maxval > 255 else arr.copy()


def _write_pgm(path: Path, img: np.ndarray, maxval: int) -> None:
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode()
    body = img.astype(">u2" if maxval > 255 else "u1").tobytes()
    path.write_bytes(header + body)


def _load_pgm_stack(directory: Path) -> Volume:
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".pgm")
    if not files:
        raise VolumeFormatError(f"no .pgm files in {directory}")
    frames = []
    for f in files:
        img = _read_pgm(f)
        if img.dtype != np.uint8:
            raise VolumeFormatError(f"{f}: 16-bit PGM is not a valid B-scan source")
        if frames and img.shape != frames[0].shape:
            raise VolumeFormatError(
                f"{f}: size {img.shape} differs from first frame {frames[0].shape}"
            )
        frames.append(img)
    return Volume(np.stack(frames, axis=0))


def save_volume_pgm(vol: Volume, directory: str | Path) -> list[Path]:
    """Write one 8-bit PGM per B-scan, named so lexicographic order is frame order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for y in range(vol.frames):
        p = directory / f"frame_{y:04d}.pgm"
        _write_pgm(p, vol.voxels[y], 255)
        paths.append(p)
    return paths


def load_volume(path: str | Path, fmt: str | None = None) -> tuple[Volume, VolumeMeta]:
    """Load a volume from ``<base>.raw`` + ``<base>.json`` or a directory of PGMs.

    Parameters
    ----------
    path : file or directory
    fmt : "raw", "pgm" or None to infer from the path.

    Returns the volume and a :class:`VolumeMeta` whose axial scale is the
    1.0 placeholder until the caller overrides it.
    """
    path = Path(path)
    if fmt is None:
        fmt = "pgm" if path.is_dir() else "raw"
    if fmt == "raw":
        vol = _load_raw(path)
    elif fmt == "pgm":
        if not path.is_dir():
            raise VolumeFormatError(f"pgm format expects a directory, got {path}")
        vol = _load_pgm_stack(path)
    else:
        raise VolumeFormatError(f"unknown volume format {fmt!r}")
    return vol, VolumeMeta(source=str(path))


# ---------------------------------------------------------------------------
# depth maps

def save_depth_map(depths: np.ndarray, path: str | Path) -> Path:
    """Write a (frames, width) depth map as header-less CSV, one row per frame.

    Integer-valued maps are written as integers and round-trip exactly;
    fractional maps use shortest-repr floats.
    """
    depths = np.asarray(depths)
    if depths.ndim != 2:
        raise ValueError(f"depth map must be 2D, got shape {depths.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    integral = np.all(depths == np.round(depths))
    with open(path, "w", newline="\n") as fh:
        for row in depths:
            if integral:
                fh.write(",".join(str(int(v)) for v in row))
            else:
                fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")
    return path


def load_depth_map(path: str | Path) -> np.ndarray:
    try:
        arr = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as e:
        raise VolumeFormatError(f"{path}: not a depth-map CSV ({e})") from e
    return arr


def save_depth_map_pgm16(depths: np.ndarray, path: str | Path) -> Path:
    """Write a depth map as 16-bit PGM (values rounded, clipped to [0, 65535])."""
    depths = np.asarray(depths)
    img = np.clip(np.round(depths), 0, 65535).astype(np.uint16)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_pgm(path, img, 65535)
    return path


def load_depth_map_pgm16(path: str | Path) -> np.ndarray:
    img = _read_pgm(Path(path))
    return img.astype(np.float64)


# ---------------------------------------------------------------------------
# flattening

def flatten_volume(vol: Volume, rpe: np.ndarray) -> tuple[Volume, FlattenOffsets]:
    """Shift every A-scan down so the RPE lands on a common reference depth.

    The reference is the deepest RPE depth in the map, so all shifts are
    downward (non-negative) and no tissue above the RPE is ever pushed off
    the bottom.  Vacated voxels at the top are zero-filled; whatever slides
    past the last depth sample (choroid only) is dropped.
    """
    rpe = np.asarray(rpe)
    if rpe.shape != (vol.frames, vol.width):
        raise ValueError(
            f"rpe map shape {rpe.shape} does not match volume ({vol.frames}, {vol.width})"
        )
    rpe_int = np.clip(np.round(rpe).astype(np.int64), 0, vol.depth - 1)
    reference = int(rpe_int.max())
    offsets = reference - rpe_int  # >= 0 by choice of reference
    out = np.zeros_like(vol.voxels)
    depth = vol.depth
    for d in np.unique(offsets):
        ys, xs = np.nonzero(offsets == d)
        if d == 0:
            out[ys, :, xs] = vol.voxels[ys, :, xs]
        else:
            out[ys, d:, xs] = vol.voxels[ys, : depth - d, xs]
    return Volume(out), FlattenOffsets(offsets=offsets, reference_depth=reference)


def unflatten_depths(depths: np.ndarray, offsets: FlattenOffsets) -> np.ndarray:
    """Map flattened-space depths back to original coordinates (exact inverse)."""
    depths = np.asarray(depths)
    if depths.shape != offsets.offsets.shape:
        raise ValueError(
            f"depth map shape {depths.shape} does not match offsets {offsets.offsets.shape}"
        )
    return depths - offsets.offsets
