"""Depth-driven instance mask refinement and panoptic TSDF mapping."""

from .depth_proc import HoleFillConfig, fill_holes, gaussian_kernel_2d
from .kde import (
    BinnedSample,
    DegenerateSampleError,
    DensityEstimate,
    GridSpec,
    direct_kde,
    fft_kde,
    isj_bandwidth,
    linear_binning,
    make_grid,
)
from .mask_refine import (
    DepthCutoffs,
    InstanceMask,
    PanopticLabel,
    RefineConfig,
    extract_instance_depths,
    find_cutoffs,
    refine_all,
    refine_mask,
)
from .panoptic_tsdf import (
    CameraIntrinsics,
    LabeledRgbdFrame,
    PanopticVoxelMap,
    Pose,
    Voxel,
    backproject,
    project_point,
    voxel_label,
    voxel_sdf_update,
)

__version__ = "0.1.0"
