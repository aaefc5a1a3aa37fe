"""voxfuse: online TSDF + semantic label fusion over a dense voxel grid.

Depth and 2D label frames stream into global distance/weight/label/score
grids through camera-aligned window extraction, per-ray update prediction,
and trilinear splat-back; labeled meshes come out via marching cubes.
Includes an analytic synthetic-scene oracle and the evaluation metrics.
"""

from .errors import (
    AllocationError,
    BehindCameraError,
    BoundsError,
    ConfigError,
    DataFormatError,
    EmptyMeshError,
    InvalidSampleError,
    PredictorFaultError,
    VoxfuseError,
)
from .frames import DepthFrame, LabelFrame
from .fusion import (
    ClassicPredictor,
    FrameReport,
    FusionConfig,
    FusionInput,
    FusionPredictor,
    filter_outliers,
    fuse_frame,
    integrate,
)
from .geometry import Intrinsics, Pose, Ray, project, ray_samples, unproject
from .meshing import TriMesh, marching_cubes
from .metrics import (
    ConfusionMatrix,
    IouReport,
    ReconReport,
    bootstrapped_ce,
    fscore,
    fusion_loss,
    iou_per_class,
    labels_to_vertices,
    multiscale_seg_loss,
    sample_surface,
)
from .semantics import lift_labels, update_labels
from .synth import (
    AnalyticScene,
    Box,
    NoiseModel,
    Plane,
    Room,
    Sphere,
    apply_noise,
    bake_gt_volume,
    render_depth,
    trajectory,
)
from .volume import VolumeConfig, VoxelVolume, new_volume, snapshot_stats
from .window import LocalWindow, SplatAccumulator, extract, splat

__version__ = "0.1.0"
