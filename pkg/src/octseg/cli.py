"""Command-line front end.

Subcommands: ``segment`` (volume in, seven depth maps + summary out),
``eval`` (result vs truth error table), ``render`` (B-scan overlay or
thickness heatmap), ``phantom`` (synthetic volume + truth).  Exit codes:
0 success, 2 usage, 3 I/O, 4 validation, 5 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from octseg.phantom import PhantomSpec, evaluate, generate_phantom, layer_thickness_report
from octseg.pipeline import (
    ANATOMICAL_ORDER,
    Boundary,
    BoundarySet,
    ConfigError,
    PipelineConfig,
    boundary_file_stem,
    segment_all,
    thickness_map,
)
from octseg.volume import (
    VolumeMeta,
    VolumeFormatError,
    load_volume,
    save_depth_map,
    save_depth_map_pgm16,
    save_volume,
    save_volume_pgm,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_VALIDATION = 4
EXIT_INTERNAL = 5


@dataclass(frozen=True)
class RenderStyle:
    """Colors and geometry for overlays and heatmaps."""

    colors: tuple[tuple[int, int, int], ...] = (
        (230, 40, 40),    # vitreous-ILM
        (40, 200, 60),    # NFL-GCL
        (250, 220, 40),   # IPL-INL
        (40, 220, 220),   # INL-OPL
        (230, 60, 230),   # OPL-ONL
        (250, 140, 30),   # ONL-IS/OS
        (70, 90, 250),    # RPE-choroid
    )
    line_thickness: int = 1
    ramp: str = "viridis"

    def __post_init__(self):
        if len(self.colors) != 7 or len(set(self.colors)) != 7:
            raise ValueError("need seven distinct boundary colors")
        if self.line_thickness < 1:
            raise ValueError("line_thickness must be >= 1")


def _boundary_arg(name: str) -> Boundary:
    try:
        return Boundary(name.lower())
    except ValueError:
        valid = ", ".join(b.value for b in ANATOMICAL_ORDER)
        raise ValueError(f"unknown boundary {name!r}; one of: {valid}") from None


# ---------------------------------------------------------------------------
# segment

def cmd_segment(args) -> int:
    cfg = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    if args.threads is not None:
        cfg.threads = int(args.threads)
        if cfg.threads < 1:
            raise ConfigError("threads must be >= 1")
    vol, meta = load_volume(args.input, fmt=args.format)
    cfg.validate_for_volume(vol)  # fail before any voxel work

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    try:
        result = segment_all(vol, cfg)
        for b in ANATOMICAL_ORDER:
            stem = boundary_file_stem(b)
            written.append(save_depth_map(result.boundaries[b], out_dir / f"{stem}.csv"))
            written.append(
                save_depth_map_pgm16(result.boundaries[b], out_dir / f"{stem}.pgm")
            )
        summary = {
            "input": str(args.input),
            "volume": {"width": vol.width, "frames": vol.frames, "depth": vol.depth},
            "threads": cfg.threads,
            **result.quality_summary(),
        }
        summary_path = out_dir / "summary.json"
        summary_path.write_text(json.dumps(summary, indent=2) + "\n")
        written.append(summary_path)
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        raise
    print(f"segmented {args.input}: {len(written)} files in {out_dir}")
    print(f"  total {summary['total_seconds']:.2f} s, "
          f"{summary['seconds_per_frame']:.3f} s/frame, "
          f"ordering violations {summary['ordering_violations']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args) -> int:
    result = BoundarySet.load_dir(args.result)
    truth = BoundarySet.load_dir(args.truth)
    meta = VolumeMeta(axial_um_per_px=args.scale_um_per_px)
    report = evaluate(result, truth, meta)
    print(report.format_table())
    out = Path(args.out) if args.out else Path(args.result) / "error_report.csv"
    report.to_csv(out)
    print(f"report written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# render

def _draw_overlay(vol, boundaries: BoundarySet, frame: int, style: RenderStyle) -> Image.Image:
    img = Image.fromarray(vol.voxels[frame], mode="L").convert("RGB")
    draw = ImageDraw.Draw(img)
    for b, color in zip(ANATOMICAL_ORDER, style.colors):
        depths = np.asarray(boundaries[b])[frame]
        points = [(x, float(depths[x])) for x in range(depths.shape[0])]
        draw.line(points, fill=color, width=style.line_thickness)
    return img


def _draw_heatmap(values: np.ndarray, style: RenderStyle) -> tuple[Image.Image, dict]:
    from matplotlib import colormaps

    vmin, vmax = float(values.min()), float(values.max())
    span = vmax - vmin
    unit = (values - vmin) / span if span > 0 else np.zeros_like(values)
    rgba = colormaps[style.ramp](unit, bytes=True)
    legend = {"min": vmin, "max": vmax, "ramp": style.ramp}
    return Image.fromarray(rgba[..., :3], mode="RGB"), legend


def cmd_render(args) -> int:
    boundaries = BoundarySet.load_dir(args.boundaries)
    style = RenderStyle(ramp=args.ramp) if args.ramp else RenderStyle()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    if args.thickness:
        top = _boundary_arg(args.thickness[0])
        bottom = _boundary_arg(args.thickness[1])
        values = thickness_map(boundaries, top, bottom, args.scale_um_per_px)
        img, legend = _draw_heatmap(values, style)
        img.save(out, format="PNG")
        save_depth_map(values, out.with_suffix(".csv"))
        legend.update(
            {
                "units": "um",
                "top": top.value,
                "bottom": bottom.value,
                "scale_um_per_px": args.scale_um_per_px,
            }
        )
        out.with_suffix(".json").write_text(json.dumps(legend, indent=2) + "\n")
        print(f"thickness map {top.value} -> {bottom.value}: "
              f"[{legend['min']:.1f}, {legend['max']:.1f}] um, wrote {out}")
        return EXIT_OK

    if args.frame is None:
        raise ValueError("render needs either --frame or --thickness TOP BOTTOM")
    if args.input is None:
        raise ValueError("--frame overlay rendering needs --input")
    vol, _ = load_volume(args.input, fmt=args.format)
    if not 0 <= args.frame < vol.frames:
        raise ValueError(f"frame {args.frame} out of range [0, {vol.frames})")
    if vol.frames != boundaries.shape[0] or vol.width != boundaries.shape[1]:
        raise ValueError(
            f"volume lateral dims {(vol.frames, vol.width)} do not match "
            f"boundary maps {boundaries.shape}"
        )
    img = _draw_overlay(vol, boundaries, args.frame, style)
    img.save(out, format="PNG")
    print(f"overlay for frame {args.frame} written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# phantom

def cmd_phantom(args) -> int:
    spec = PhantomSpec.from_json(args.spec) if args.spec else PhantomSpec()
    if args.seed is not None:
        d = spec.to_dict()
        d["seed"] = int(args.seed)
        spec = PhantomSpec.from_dict(d)
    vol, truth = generate_phantom(spec)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.format == "pgm":
        save_volume_pgm(vol, out_dir / "volume")
    else:
        save_volume(vol, out_dir / "volume")
    truth.save_dir(out_dir / "truth")
    spec.to_json(out_dir / "phantom_spec.json")
    print(f"phantom seed {spec.seed}: volume + truth written to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="octseg",
        description="Volumetric retinal OCT segmentation: seven boundary surfaces.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("segment", help="segment a volume into seven depth maps")
    ps.add_argument("--input", required=True, help="volume: .raw, .json sidecar, or PGM directory")
    ps.add_argument("--config", help="pipeline config JSON")
    ps.add_argument("--out", required=True, help="output directory")
    ps.add_argument("--format", choices=["raw", "pgm"], help="force input format")
    ps.add_argument("--threads", type=int, help="worker count (results are identical for any value)")
    ps.set_defaults(func=cmd_segment)

    pe = sub.add_parser("eval", help="compare result depth maps against truth")
    pe.add_argument("--result", required=True, help="directory with seven result CSVs")
    pe.add_argument("--truth", required=True, help="directory with seven truth CSVs")
    pe.add_argument("--scale-um-per-px", type=float, default=1.0)
    pe.add_argument("--out", help="report CSV path (default: <result>/error_report.csv)")
    pe.set_defaults(func=cmd_eval)

    pr = sub.add_parser("render", help="overlay a B-scan or draw a thickness heatmap")
    pr.add_argument("--input", help="volume (required for --frame overlays)")
    pr.add_argument("--boundaries", required=True, help="directory with seven depth-map CSVs")
    pr.add_argument("--frame", type=int, help="B-scan index for an overlay")
    pr.add_argument("--thickness", nargs=2, metavar=("TOP", "BOTTOM"),
                    help="two boundary names for a thickness heatmap")
    pr.add_argument("--scale-um-per-px", type=float, default=1.0)
    pr.add_argument("--format", choices=["raw", "pgm"], help="force input format")
    pr.add_argument("--ramp", help="matplotlib colormap name for heatmaps")
    pr.add_argument("--out", required=True, help="output PNG path")
    pr.set_defaults(func=cmd_render)

    pp = sub.add_parser("phantom", help="generate a synthetic volume with ground truth")
    pp.add_argument("--spec", help="phantom spec JSON (defaults used if omitted)")
    pp.add_argument("--seed", type=int, help="override the spec's seed")
    pp.add_argument("--out", required=True, help="output directory")
    pp.add_argument("--format", choices=["raw", "pgm"], default="raw",
                    help="volume output format")
    pp.set_defaults(func=cmd_phantom)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError, PermissionError, OSError) as e:
        print(f"octseg: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, VolumeFormatError, ValueError) as e:
        print(f"octseg: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # pragma: no cover - defensive
        print(f"octseg: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
