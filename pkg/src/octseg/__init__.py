"""Seven-boundary segmentation of volumetric retinal OCT scans.

The package is organised in thin layers:

* :mod:`octseg.volume` - voxel container, disk formats, flattening
* :mod:`octseg.filters` - 3D denoising / boundary-enhancement filters
* :mod:`octseg.surface` - depth-map smoothing and outlier repair
* :mod:`octseg.pipeline` - per-boundary segmentation stages
* :mod:`octseg.phantom` - synthetic ground-truth volumes and error reports
* :mod:`octseg.cli` - command line front end
"""

from octseg.volume import (
    FlattenOffsets,
    Volume,
    VolumeFormatError,
    VolumeMeta,
    flatten_volume,
    load_depth_map,
    load_volume,
    save_depth_map,
    save_volume,
    unflatten_depths,
)
from octseg.filters import Orientation, diff_filter, erode_ball, mean_filter, threshold_zero
from octseg.surface import (
    SmoothingSchedule,
    WeightMatrices,
    error_distance_map,
    merge_depth_maps,
    poly3_reject,
    smooth_depth_map,
)
from octseg.pipeline import (
    Boundary,
    BoundarySet,
    ConfigError,
    PipelineConfig,
    SegmentationResult,
    segment_all,
    segment_ilm,
    segment_inner,
    segment_isos,
    segment_rpe,
)
from octseg.phantom import ErrorReport, PhantomSpec, evaluate, generate_phantom

__version__ = "0.1.0"

__all__ = [
    "Boundary",
    "BoundarySet",
    "ConfigError",
    "ErrorReport",
    "FlattenOffsets",
    "Orientation",
    "PhantomSpec",
    "PipelineConfig",
    "SegmentationResult",
    "SmoothingSchedule",
    "Volume",
    "VolumeFormatError",
    "VolumeMeta",
    "WeightMatrices",
    "diff_filter",
    "erode_ball",
    "error_distance_map",
    "evaluate",
    "flatten_volume",
    "generate_phantom",
    "load_depth_map",
    "load_volume",
    "mean_filter",
    "merge_depth_maps",
    "poly3_reject",
    "save_depth_map",
    "save_volume",
    "segment_all",
    "segment_ilm",
    "segment_inner",
    "segment_isos",
    "segment_rpe",
    "smooth_depth_map",
    "threshold_zero",
    "unflatten_depths",
    "__version__",
]
